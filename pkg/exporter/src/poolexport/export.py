"""Dump a pretrained model's pooling inputs and weights to tensor files.

Given a model whose visual tower ends in a query-from-mean attention
pooling layer (``visual.attnpool`` with ``q_proj``/``k_proj``/``v_proj``/
``c_proj`` linears, a ``positional_embedding`` table, and ``num_heads``),
the exporter writes, for each listed image, the dense feature map that
enters that layer; the pooling layer's weights under the names the
downstream loader expects; and classifier rows built by prompt ensembling
through ``model.encode_text``. Everything lands in one directory
described by a ``manifest.json``.

The forward passes run in eval mode under ``no_grad``, so re-running an
export with identical inputs reproduces every file bit for bit.
"""

from __future__ import annotations

import csv
import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np
import torch
from PIL import Image

from .tensorfile import write_tensor

SPLITS = ("train", "val", "test")


class ExportError(RuntimeError):
    pass


@dataclass
class ImageEntry:
    path: str
    label: str   # class name; row order in the classifier follows class order
    split: str


@dataclass
class ExportJob:
    model: object                 # .visual with .attnpool, .encode_text(list)
    images: List[ImageEntry]
    templates: List[str]          # e.g. "a photo of a [CLASS]"
    out_dir: Path
    classes: Optional[List[str]] = None  # default: first-appearance order
    image_size: int = 224
    batch_size: int = 8
    name: str = "export"
    preprocess: Optional[Callable] = None  # PIL image -> (3, H, W) tensor

    def __post_init__(self):
        if not self.images:
            raise ExportError("image list is empty")
        if not self.templates:
            raise ExportError("template list is empty")
        for e in self.images:
            if e.split not in SPLITS:
                raise ExportError(f"unknown split {e.split!r} for {e.path}")
        if self.classes is None:
            seen = []
            for e in self.images:
                if e.label not in seen:
                    seen.append(e.label)
            self.classes = seen
        missing = {e.label for e in self.images} - set(self.classes)
        if missing:
            raise ExportError(f"labels without classifier rows: {missing}")


def read_image_list(path) -> List[ImageEntry]:
    """Parse a path,label,split CSV (header optional)."""
    entries = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().lower() == "path":
                continue
            if len(row) != 3:
                raise ExportError(f"{path}: expected path,label,split: {row}")
            entries.append(ImageEntry(*(c.strip() for c in row)))
    return entries


def _default_preprocess(image: Image.Image, size: int) -> torch.Tensor:
    image = image.convert("RGB").resize((size, size), Image.BILINEAR)
    arr = np.asarray(image, dtype=np.float32) / 255.0
    return torch.from_numpy((arr - 0.5) / 0.5).permute(2, 0, 1)


def expand_template(template: str, class_name: str) -> str:
    if "[CLASS]" in template:
        return template.replace("[CLASS]", class_name)
    if "{}" in template:
        return template.format(class_name)
    return f"{template} {class_name}".strip()


def classifier_rows(model, classes, templates) -> np.ndarray:
    """One row per class: mean of the per-template normalized text
    embeddings, re-normalized."""
    rows = []
    with torch.no_grad():
        for cls in classes:
            prompts = [expand_template(t, cls) for t in templates]
            emb = torch.as_tensor(model.encode_text(prompts)).double()
            emb = emb / emb.norm(dim=-1, keepdim=True)
            mean = emb.mean(dim=0)
            rows.append((mean / mean.norm()).float().numpy())
    return np.stack(rows)


def attnpool_tensors(attnpool) -> dict:
    """Translate the torch layer into the loader's naming/layout.

    Torch linears compute ``x @ W.T + b``; the consumer computes
    ``x @ w + b``, so each weight is transposed on the way out.
    """
    def wt(linear):
        return linear.weight.detach().cpu().numpy().T.astype(np.float32)

    def bias(linear):
        return linear.bias.detach().cpu().numpy().astype(np.float32)

    return {
        "w_q": wt(attnpool.q_proj), "b_q": bias(attnpool.q_proj),
        "w_k": wt(attnpool.k_proj), "b_k": bias(attnpool.k_proj),
        "w_v": wt(attnpool.v_proj), "b_v": bias(attnpool.v_proj),
        "w_c": wt(attnpool.c_proj), "b_c": bias(attnpool.c_proj),
        "pos_embed": attnpool.positional_embedding.detach().cpu()
        .numpy().astype(np.float32),
    }


def _capture_dense_maps(model, batch: torch.Tensor) -> np.ndarray:
    """Run the visual tower, intercepting the pooling layer's input."""
    captured = {}

    def hook(_module, args):
        captured["maps"] = args[0].detach()

    handle = model.visual.attnpool.register_forward_pre_hook(hook)
    try:
        with torch.no_grad():
            model.visual(batch)
    finally:
        handle.remove()
    if "maps" not in captured:
        raise ExportError("pooling layer was never reached by the forward pass")
    maps = captured["maps"]          # (B, C, H, W)
    if maps.ndim != 4:
        raise ExportError(f"expected a (B, C, H, W) dense map, got {tuple(maps.shape)}")
    return maps.permute(0, 2, 3, 1).cpu().numpy().astype(np.float32)


def export(job: ExportJob) -> Path:
    """Run the export; returns the manifest path.

    On any failure every file written by this call is removed (and the
    output directory itself, if this call created it).
    """
    out = Path(job.out_dir)
    created_root = not out.exists()
    out.mkdir(parents=True, exist_ok=True)
    model = job.model
    if hasattr(model, "eval"):
        model.eval()
    pre = job.preprocess or (lambda im: _default_preprocess(im, job.image_size))

    try:
        attnpool = model.visual.attnpool
        tensors = attnpool_tensors(attnpool)
        channels = tensors["w_q"].shape[0]
        embed_dim = tensors["w_q"].shape[1]
        out_dim = tensors["w_c"].shape[1]

        ckpt = out / "attnpool_o"
        ckpt.mkdir(exist_ok=True)
        for fname, tensor in tensors.items():
            write_tensor(ckpt / f"{fname}.tf", tensor)
        (ckpt / "meta.json").write_text(json.dumps({
            "heads": int(attnpool.num_heads),
            "scale": None,  # checkpoint convention: sqrt(embed_dim / heads)
            "include_mean_token": True,
            "has_pos_embed": True,
        }, sort_keys=True, indent=2))

        rows = classifier_rows(model, job.classes, job.templates)
        if rows.shape != (len(job.classes), out_dim):
            raise ExportError(
                f"classifier shape {rows.shape} != "
                f"({len(job.classes)}, {out_dim})")
        write_tensor(out / "classifier.tf", rows.astype(np.float32))

        (out / "features").mkdir(exist_ok=True)
        label_index = {c: i for i, c in enumerate(job.classes)}
        samples = []
        grid_hw = None
        for start in range(0, len(job.images), job.batch_size):
            chunk = job.images[start:start + job.batch_size]
            try:
                batch = torch.stack([
                    pre(Image.open(e.path)) for e in chunk])
            except OSError as exc:
                raise ExportError(f"cannot read image: {exc}") from exc
            maps = _capture_dense_maps(model, batch)    # (B, H, W, C)
            if maps.shape[-1] != channels:
                raise ExportError(
                    f"dense map channels {maps.shape[-1]} != "
                    f"pooling input dim {channels}")
            if grid_hw is None:
                grid_hw = maps.shape[1:3]
                n_tokens = grid_hw[0] * grid_hw[1] + 1
                if tensors["pos_embed"].shape[0] != n_tokens:
                    raise ExportError(
                        f"positional table has {tensors['pos_embed'].shape[0]}"
                        f" rows, grid needs {n_tokens}")
            elif maps.shape[1:3] != grid_hw:
                raise ExportError("inconsistent grid sizes across images")
            for entry, grid in zip(chunk, maps):
                rel = f"features/{len(samples):05d}.tf"
                write_tensor(out / rel,
                             grid.reshape(-1, channels))
                samples.append({"path": rel,
                                "label": label_index[entry.label],
                                "split": entry.split})

        manifest = {
            "name": job.name,
            "classes": list(job.classes),
            "grid": {"height": int(grid_hw[0]), "width": int(grid_hw[1]),
                     "channels": int(channels)},
            "embed_dim": int(out_dim),
            "samples": samples,
            "classifier_path": "classifier.tf",
            "attnpool_checkpoint": "attnpool_o",
            "flags": {
                "include_mean_token": True,
                "pos_embed": True,
                "scale": None,
            },
            "metadata": {
                "exporter": "poolexport",
                "templates": list(job.templates),
                "image_size": job.image_size,
                "pool_embed_dim": int(embed_dim),
            },
        }
        path = out / "manifest.json"
        path.write_text(json.dumps(manifest, sort_keys=True, indent=2))
        return path
    except BaseException:
        if created_root:
            shutil.rmtree(out, ignore_errors=True)
        else:
            for sub in ("attnpool_o", "features"):
                shutil.rmtree(out / sub, ignore_errors=True)
            for f in ("classifier.tf", "manifest.json"):
                (out / f).unlink(missing_ok=True)
        raise
