"""Command-line shim: load a saved PyTorch model, apply a transformation
grammar to a dataset, and write the dump (plus optionally the weights).

    tm-export model.pt images.npy rotation:25 --output st.stdump \
        --weights-out model.nnw --input-shape 28x28x1
"""

from __future__ import annotations

import argparse
import sys

import numpy as np
import torch

from .export import ExportError, HookPlan, export_activations, export_weights
from .transforms import parse_transform_spec


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="tm-export", description=__doc__)
    parser.add_argument("model", help="torch.save()'d nn.Module")
    parser.add_argument("dataset", help=".npy array of images, n x H x W x C (uint8 or [0,1] float)")
    parser.add_argument("transforms", help="rotation:<m> | scale:<count> | translation:<f,..> | file:<path>")
    parser.add_argument("--output", required=True, help="STDUMP output path")
    parser.add_argument("--weights-out", default=None, help="also export weights as NNW")
    parser.add_argument("--input-shape", default=None, help="HxWxC (required for --weights-out)")
    parser.add_argument("--taps", default="*", help="comma-separated module name patterns")
    parser.add_argument("--samples", type=int, default=None, help="limit sample count")
    args = parser.parse_args(argv)

    try:
        model = torch.load(args.model, map_location="cpu", weights_only=False)
        images = np.load(args.dataset)
        if images.ndim != 4:
            raise ValueError(f"dataset must be n x H x W x C, got shape {images.shape}")
        if args.samples:
            images = images[: args.samples]
        transformations, label = parse_transform_spec(args.transforms)
        plan = HookPlan(patterns=tuple(p.strip() for p in args.taps.split(",") if p.strip()))
        entries = export_activations(
            model, list(images), transformations, args.output, plan,
            extra_metadata={"transformations_label": label, "model_id": args.model},
        )
        print(f"wrote {len(images)} x {len(transformations)} records, "
              f"{sum(int(np.prod(e['shape'])) for e in entries)} cells -> {args.output}")
        if args.weights_out:
            if not args.input_shape:
                parser.error("--weights-out requires --input-shape HxWxC")
            shape = tuple(int(v) for v in args.input_shape.split("x"))
            export_weights(model, shape, args.weights_out)
            print(f"wrote weights -> {args.weights_out}")
        return 0
    except ExportError as e:
        print(f"error [{e.code}]: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
