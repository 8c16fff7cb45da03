"""Multi-view datasets on disk: a JSON manifest next to float images.

Layout of a views directory::

    manifest.json
    view_000.pfm      ground-truth color
    albedo_000.pfm    ground-truth albedo map (optional)
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

from .errors import InvalidInputError
from .geometry import Camera
from .images import ImageBuffer, read_pfm, write_pfm

MANIFEST = "manifest.json"
FORMAT = "omg-views"
VERSION = 1


@dataclass
class View:
    camera: Camera
    image: ImageBuffer | None = None
    albedo: ImageBuffer | None = None


def save_views(directory, views: list[View], mode: str) -> list[str]:
    """Write images and the manifest; returns the paths written."""
    os.makedirs(directory, exist_ok=True)
    written = []
    entries = []
    for k, view in enumerate(views):
        entry = {"camera": view.camera.to_dict()}
        for key, buf, stem in (("image", view.image, "view"), ("albedo", view.albedo, "albedo")):
            if buf is not None:
                name = f"{stem}_{k:03d}.pfm"
                write_pfm(os.path.join(directory, name), buf)
                written.append(os.path.join(directory, name))
                entry[key] = name
        entries.append(entry)
    path = os.path.join(directory, MANIFEST)
    with open(path, "w") as f:
        json.dump({"format": FORMAT, "version": VERSION, "mode": mode, "views": entries}, f, indent=1)
        f.write("\n")
    written.append(path)
    return written


def load_manifest(directory) -> dict:
    path = os.path.join(directory, MANIFEST)
    if not os.path.isfile(path):
        raise FileNotFoundError(f"missing views manifest {path}")
    with open(path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"{path}: {exc}") from None
    if data.get("format") != FORMAT or data.get("version") != VERSION:
        raise InvalidInputError(f"{path}: expected {FORMAT} version {VERSION}")
    return data


def load_views(directory, *, images: bool = True) -> list[View]:
    """Cameras (and, if asked, images) from a views directory.

    A listed image that does not exist raises FileNotFoundError naming it.
    """
    out = []
    for entry in load_manifest(directory)["views"]:
        cam = Camera.from_dict(entry["camera"])
        view = View(cam)
        if images:
            for key in ("image", "albedo"):
                if key not in entry:
                    continue
                path = os.path.join(directory, entry[key])
                if not os.path.isfile(path):
                    raise FileNotFoundError(f"missing view file {path}")
                buf = read_pfm(path)
                if (buf.height, buf.width) != (cam.height, cam.width):
                    raise InvalidInputError(
                        f"{path} is {buf.width}x{buf.height} but its camera is {cam.width}x{cam.height}")
                setattr(view, key, buf)
        out.append(view)
    return out
