"""Command-line entry point.

The model is supplied through a factory import path
(``--model some.module:build``) so any checkpoint source can be plugged
in; the factory receives the ``--checkpoint`` string (or None) and must
return an object with a ``visual.attnpool`` tower and ``encode_text``.
"""

from __future__ import annotations

import argparse
import importlib
import sys
from pathlib import Path

from .export import ExportError, ExportJob, export, read_image_list


def load_model(spec: str, checkpoint):
    if ":" not in spec:
        raise ExportError(f"--model must be module:factory, got {spec!r}")
    module_name, attr = spec.split(":", 1)
    factory = getattr(importlib.import_module(module_name), attr)
    return factory(checkpoint)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="poolexport",
        description="Export dense maps, pooling weights, and classifier rows")
    parser.add_argument("--model", required=True,
                        help="factory import path, module:callable")
    parser.add_argument("--checkpoint", help="passed to the model factory")
    parser.add_argument("--images", required=True,
                        help="CSV of path,label,split")
    parser.add_argument("--templates", required=True,
                        help="text file, one prompt template per line")
    parser.add_argument("--classes",
                        help="optional text file fixing class order")
    parser.add_argument("--image-size", type=int, default=224,
                        dest="image_size")
    parser.add_argument("--batch-size", type=int, default=8,
                        dest="batch_size")
    parser.add_argument("--name", default="export")
    parser.add_argument("--out", required=True)
    args = parser.parse_args(argv)

    try:
        templates = [line.strip()
                     for line in Path(args.templates).read_text().splitlines()
                     if line.strip()]
        classes = None
        if args.classes:
            classes = [line.strip()
                       for line in Path(args.classes).read_text().splitlines()
                       if line.strip()]
        job = ExportJob(
            model=load_model(args.model, args.checkpoint),
            images=read_image_list(args.images),
            templates=templates,
            classes=classes,
            out_dir=Path(args.out),
            image_size=args.image_size,
            batch_size=args.batch_size,
            name=args.name,
        )
        manifest = export(job)
    except (ExportError, OSError, ImportError, AttributeError) as exc:
        print(f"export failed: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {manifest}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
