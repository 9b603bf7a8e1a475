"""Banks of preliminary HR images with provenance labels and disk persistence."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

from .imaging import ImagePlane, load_gray, save_png

__all__ = ["BankLabel", "ImageBank", "save_bank", "load_bank"]

MANIFEST_NAME = "manifest.csv"


@dataclass(frozen=True)
class BankLabel:
    """Provenance of one preliminary HR image.

    `index` is the neighbor count k for internal members and the dictionary
    index for external members; `rotation` counts quarter turns.
    """

    method: str
    index: int
    rotation: int

    def __post_init__(self):
        if self.method not in ("internal", "external"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.rotation not in (0, 1, 2, 3):
            raise ValueError("rotation must be a quarter-turn count in 0..3")

    @property
    def name(self) -> str:
        tag = "k" if self.method == "internal" else "d"
        return f"{self.method}_{tag}{self.index}_r{self.rotation}"


@dataclass(frozen=True)
class ImageBank:
    """Ordered collection of same-sized preliminary HR images."""

    images: tuple[ImagePlane, ...]
    labels: tuple[BankLabel, ...]

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "labels", tuple(self.labels))
        if len(self.images) != len(self.labels):
            raise ValueError("one label per image required")
        if not self.images:
            raise ValueError("bank cannot be empty")
        shape = self.images[0].shape
        for img in self.images[1:]:
            if img.shape != shape:
                raise ValueError("all bank images must share dimensions")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def shape(self) -> tuple[int, int]:
        return self.images[0].shape

    def take(self, count: int) -> "ImageBank":
        """First `count` members in generation order."""
        if not 1 <= count <= len(self):
            raise ValueError(f"cannot take {count} members from a bank of {len(self)}")
        return ImageBank(self.images[:count], self.labels[:count])

    def concat(self, other: "ImageBank") -> "ImageBank":
        return ImageBank(self.images + other.images, self.labels + other.labels)


def save_bank(bank: ImageBank, directory: str | Path) -> Path:
    """Persist a bank as PNGs plus a manifest CSV (filename, method, k, rotation)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = directory / MANIFEST_NAME
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", "method", "k", "rotation"])
        for img, label in zip(bank.images, bank.labels):
            filename = f"{label.name}.png"
            save_png(directory / filename, img)
            writer.writerow([filename, label.method, label.index, label.rotation])
    return manifest


def load_bank(directory: str | Path) -> ImageBank:
    """Load a bank from a manifest directory (8-bit quantized images)."""
    directory = Path(directory)
    images: list[ImagePlane] = []
    labels: list[BankLabel] = []
    with open(directory / MANIFEST_NAME, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            images.append(load_gray(directory / row["filename"]))
            labels.append(BankLabel(row["method"], int(row["k"]), int(row["rotation"])))
    return ImageBank(tuple(images), tuple(labels))
