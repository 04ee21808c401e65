"""On-disk dataset access: manifest, images, cameras, ground-truth masks."""

from __future__ import annotations

import json
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .scene import Camera
from .synth import BACKGROUND_ID


def _camera_from_dict(d: dict) -> Camera:
    return Camera(
        position=torch.tensor(d["position"], dtype=torch.float32),
        rotation=torch.tensor(d["rotation"], dtype=torch.float32),
        fov_y=float(d["fov_y"]),
        width=int(d["width"]),
        height=int(d["height"]),
        near=float(d["near"]),
        far=float(d["far"]),
        name=d.get("name", ""),
    )


class Dataset:
    """Multi-view multi-timestep image corpus written by synth.write_dataset."""

    def __init__(self, root):
        self.root = Path(root)
        with open(self.root / "manifest.json") as fh:
            self.manifest = json.load(fh)
        self.timesteps: list[float] = list(self.manifest["timesteps"])
        self.train_cameras = [_camera_from_dict(d) for d in self.manifest["train_cameras"]]
        self.test_cameras = [_camera_from_dict(d) for d in self.manifest["test_cameras"]]
        self.files = self.manifest["files"]

    @property
    def aabb(self) -> torch.Tensor:
        return torch.tensor(self.manifest["aabb"], dtype=torch.float32)

    @property
    def n_train_images(self) -> int:
        return len(self.train_cameras) * len(self.timesteps)

    def _path(self, kind: str, v: int, t: int) -> Path:
        return self.root / self.files[kind].format(v=v, t=t)

    @lru_cache(maxsize=512)
    def _image(self, kind: str, v: int, t: int) -> torch.Tensor:
        arr = np.asarray(Image.open(self._path(kind, v, t)))
        return torch.from_numpy(arr.astype(np.float32) / 255.0)

    def train_image(self, view: int, t_index: int) -> torch.Tensor:
        return self._image("train_image", view, t_index)

    def test_image(self, view: int, t_index: int) -> torch.Tensor:
        return self._image("test_image", view, t_index)

    def _labels(self, kind: str, v: int, t: int) -> np.ndarray:
        return np.asarray(Image.open(self._path(kind, v, t)), dtype=np.int32)

    def train_segment_map(self, view: int, t_index: int) -> np.ndarray:
        return self._labels("train_mask", view, t_index)

    def test_segment_map(self, view: int, t_index: int) -> np.ndarray:
        return self._labels("test_mask", view, t_index)

    def train_blob_map(self, view: int, t_index: int) -> np.ndarray:
        return self._labels("train_blob", view, t_index)

    def test_blob_map(self, view: int, t_index: int) -> np.ndarray:
        return self._labels("test_blob", view, t_index)

    def segment_mask(self, segment_id: int, view: int, t_index: int, test: bool = False) -> np.ndarray:
        m = self.test_segment_map(view, t_index) if test else self.train_segment_map(view, t_index)
        return m == segment_id

    def blob_mask(self, segment_id: int, view: int, t_index: int, test: bool = False) -> np.ndarray:
        m = self.test_blob_map(view, t_index) if test else self.train_blob_map(view, t_index)
        return m == segment_id

    def foreground_mask(self, view: int, t_index: int, test: bool = False) -> np.ndarray:
        m = self.test_segment_map(view, t_index) if test else self.train_segment_map(view, t_index)
        return m != BACKGROUND_ID

    def solo_mask(self, segment_id: int, view: int, t_index: int) -> np.ndarray:
        """Unoccluded silhouette of one segment on a test view."""
        path = self.root / self.files["test_solo"].format(v=view, t=t_index, s=segment_id)
        return np.asarray(Image.open(path)) > 0

    def t_index_of(self, t: float) -> int:
        diffs = [abs(t - ts) for ts in self.timesteps]
        return int(np.argmin(diffs))

    def blob_table(self) -> list[dict]:
        return self.manifest["blobs"]

    def children_of(self, parent_id: int) -> list[int]:
        return [b["segment_id"] for b in self.blob_table() if b.get("parent_id") == parent_id]


class GroundTruthMaskProvider:
    """Bundled mask provider: per-view GT blob masks from the dataset.

    Emits one mask per requested leaf blob (confidence 0.9) and, optionally,
    one union mask per compound parent (confidence 0.8) so the affinity field
    sees more than one scale. The rendered image argument is ignored; this
    provider plays the role of an external mask generator with perfect output.
    """

    def __init__(self, dataset: Dataset, t_index: int, blob_ids=None, include_parent: bool = False):
        self.dataset = dataset
        self.t_index = t_index
        self.blob_ids = list(blob_ids) if blob_ids is not None else None
        self.include_parent = include_parent

    def __call__(self, view_id: str, image: np.ndarray) -> list[tuple[np.ndarray, float]]:
        view = int(view_id)
        blob_map = self.dataset.train_blob_map(view, self.t_index)
        ids = self.blob_ids
        if ids is None:
            ids = sorted(set(int(v) for v in np.unique(blob_map)) - {BACKGROUND_ID})
        out = []
        for gid in ids:
            mask = blob_map == gid
            if mask.any():
                out.append((mask, 0.9))
        if self.include_parent:
            seg_map = self.dataset.train_segment_map(view, self.t_index)
            parents = {b.get("parent_id") for b in self.dataset.blob_table() if b.get("parent_id")}
            for pid in sorted(p for p in parents if p is not None):
                mask = seg_map == pid
                if mask.any():
                    out.append((mask, 0.8))
        return out
