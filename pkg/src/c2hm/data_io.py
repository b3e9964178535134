"""Dataset ingestion (MNIST IDX) and the synthetic generators."""

from __future__ import annotations

import gzip
import os
import struct
import urllib.request
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import ContractError
from .rng import SeededRng

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
GRID = 32
MIRROR_ENV = "C2HM_MNIST_MIRROR"

# byte lengths of the official uncompressed files
MNIST_FILES = {
    "train-images-idx3-ubyte": 47040016,
    "train-labels-idx1-ubyte": 60008,
    "t10k-images-idx3-ubyte": 7840016,
    "t10k-labels-idx1-ubyte": 10008,
}
BUNDLED_DIR = Path(__file__).resolve().parents[2] / "data" / "mnist"
BUNDLED_IMAGES = "mnist10k-images-idx3-ubyte.gz"
BUNDLED_LABELS = "mnist10k-labels-idx1-ubyte.gz"


class IdxFormatError(ValueError):
    pass


class IdxLengthError(ValueError):
    pass


class IdxConsistencyError(ValueError):
    pass


@dataclass
class LabeledDataset:
    images: np.ndarray  # [N, D] in [0, 1]
    labels: np.ndarray  # [N]
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise IdxConsistencyError(f"{len(self.images)} images vs {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ContractError("pixels must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    def subset(self, index, split: str | None = None) -> "LabeledDataset":
        return LabeledDataset(self.images[index], self.labels[index], split or self.split)

    def head(self, n: int) -> "LabeledDataset":
        return self.subset(slice(0, n))


def _read_bytes(path) -> bytes:
    path = Path(path)
    data = path.read_bytes()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def parse_idx(data: bytes, expected_magic: int) -> np.ndarray:
    if len(data) < 8:
        raise IdxLengthError(f"IDX header truncated ({len(data)} bytes)")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise IdxFormatError(f"bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxLengthError("IDX dimension block truncated")
    dims = struct.unpack(">" + "I" * ndim, data[4:header])
    n = int(np.prod(dims))
    if len(data) - header < n:
        raise IdxLengthError(f"IDX payload has {len(data) - header} bytes, header promises {n}")
    return np.frombuffer(data, dtype=np.uint8, count=n, offset=header).reshape(dims)


def write_idx(array: np.ndarray) -> bytes:
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    return struct.pack(">I", magic) + struct.pack(">" + "I" * array.ndim, *array.shape) + array.tobytes()


def load_mnist_idx(images_path, labels_path, split: str = "train") -> LabeledDataset:
    raw_images = parse_idx(_read_bytes(images_path), IMAGE_MAGIC)
    raw_labels = parse_idx(_read_bytes(labels_path), LABEL_MAGIC)
    if raw_images.shape[0] != raw_labels.shape[0]:
        raise IdxConsistencyError(f"{raw_images.shape[0]} images vs {raw_labels.shape[0]} labels")
    images = raw_images.reshape(raw_images.shape[0], -1).astype(np.float64) / 255.0
    return LabeledDataset(images, raw_labels.astype(np.int64), split)


def load_bundled_mnist(data_dir=None) -> LabeledDataset:
    """The 10k-digit subset shipped under ``data/mnist``."""
    data_dir = Path(data_dir) if data_dir else BUNDLED_DIR
    images, labels = data_dir / BUNDLED_IMAGES, data_dir / BUNDLED_LABELS
    if not images.exists() or not labels.exists():
        raise FileNotFoundError(
            f"MNIST files not found in {data_dir}; run `c2hm-lab fetch-mnist` or set {MIRROR_ENV}"
        )
    return load_mnist_idx(images, labels)


def mnist_splits(data: LabeledDataset, n_train: int = 8000, n_test: int = 2000):
    """Deterministic train/test split taken in file order."""
    if n_train + n_test > len(data):
        raise ContractError(f"requested {n_train}+{n_test} images, only {len(data)} available")
    return data.subset(slice(0, n_train), "train"), data.subset(slice(n_train, n_train + n_test), "test")


def fetch_mnist(dest, mirror: str | None = None, opener=urllib.request.urlopen) -> list[Path]:
    """Download the four official files (gzip) and verify decompressed lengths."""
    mirror = mirror or os.environ.get(MIRROR_ENV)
    if not mirror:
        raise ContractError(f"no mirror URL given; pass --mirror or set {MIRROR_ENV}")
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    written = []
    for name, length in MNIST_FILES.items():
        with opener(f"{mirror.rstrip('/')}/{name}.gz") as resp:
            payload = resp.read()
        raw = gzip.decompress(payload)
        if len(raw) != length:
            raise IdxLengthError(f"{name}: got {len(raw)} bytes, expected {length}")
        out = dest / f"{name}.gz"
        out.write_bytes(payload)
        written.append(out)
    return written


# -- synthetic data ------------------------------------------------------------


@dataclass
class SyntheticLinearGaussian:
    A: np.ndarray  # [D, k]
    B: np.ndarray  # [k, d]
    sigma: float
    phi_true: np.ndarray  # [N, d]
    psi: np.ndarray  # [N, D]
    nonlinearity: str = "identity"

    @property
    def dims(self):
        return self.phi_true.shape[1], self.B.shape[0], self.A.shape[0]


def make_linear_gaussian(D=100, d=4, k=8, N=10000, sigma=0.1, seed=0) -> SyntheticLinearGaussian:
    """psi = A B phi + noise, with A, B entries ~ N(0, 1/sqrt(fan_in)) scale."""
    if not (d <= k <= D):
        raise ContractError(f"need d <= k <= D, got d={d} k={k} D={D}")
    if N < 1:
        raise ContractError("N must be positive")
    rng = SeededRng(seed)
    A = rng.standard_normal((D, k)) / np.sqrt(k)
    B = rng.standard_normal((k, d)) / np.sqrt(d)
    phi = rng.standard_normal((N, d))
    psi = phi @ B.T @ A.T
    if sigma > 0:
        psi = psi + sigma * rng.standard_normal((N, D))
    return SyntheticLinearGaussian(A, B, float(sigma), phi, psi)


def make_delta_dataset(seed=0, sigma=0.05, k=8) -> SyntheticLinearGaussian:
    """N=1000, d=2, D=20: psi = A tanh(B phi) + noise."""
    N, d, D = 1000, 2, 20
    rng = SeededRng(seed)
    A = rng.standard_normal((D, k)) / np.sqrt(k)
    B = rng.standard_normal((k, d)) / np.sqrt(d)
    phi = rng.standard_normal((N, d))
    psi = np.tanh(phi @ B.T) @ A.T + sigma * rng.standard_normal((N, D))
    return SyntheticLinearGaussian(A, B, float(sigma), phi, psi, "tanh")


# -- grid worlds ---------------------------------------------------------------


@dataclass
class GridWorld:
    occupancy: np.ndarray  # [32, 32] bool, True = obstacle
    start: tuple[int, int]
    goal: tuple[int, int]

    def __post_init__(self):
        self.occupancy = np.asarray(self.occupancy, dtype=bool)
        for name, cell in (("start", self.start), ("goal", self.goal)):
            if self.occupancy[cell]:
                raise ContractError(f"{name} cell {cell} is occupied")

    @property
    def shape(self):
        return self.occupancy.shape

    def free(self, cell) -> bool:
        r, c = cell
        h, w = self.shape
        return 0 <= r < h and 0 <= c < w and not self.occupancy[r, c]

    def raster(self) -> np.ndarray:
        return self.occupancy.astype(np.float64).reshape(-1)


class GridGenerationError(RuntimeError):
    pass


def reachable(occupancy: np.ndarray, start, goal) -> bool:
    """Flood fill over 4-neighbours."""
    h, w = occupancy.shape
    if occupancy[start] or occupancy[goal]:
        return False
    seen = np.zeros_like(occupancy, dtype=bool)
    seen[start] = True
    todo = deque([start])
    while todo:
        r, c = todo.popleft()
        if (r, c) == tuple(goal):
            return True
        for nr, nc in ((r + 1, c), (r - 1, c), (r, c + 1), (r, c - 1)):
            if 0 <= nr < h and 0 <= nc < w and not seen[nr, nc] and not occupancy[nr, nc]:
                seen[nr, nc] = True
                todo.append((nr, nc))
    return False


def make_gridworld(seed: int, obstacle_density: float, size: int = GRID, start=None, goal=None,
                   max_tries: int = 100) -> GridWorld:
    if not 0.0 <= obstacle_density <= 0.4:
        raise ContractError("obstacle density must lie in [0, 0.4]")
    rng = SeededRng(seed)
    start = tuple(start) if start else (1, 1)
    goal = tuple(goal) if goal else (size - 2, size - 2)
    for _ in range(max_tries):
        occ = rng.uniform((size, size)) < obstacle_density
        occ[start] = occ[goal] = False
        if reachable(occ, start, goal):
            return GridWorld(occ, start, goal)
    raise GridGenerationError(f"no feasible map after {max_tries} tries (density {obstacle_density})")


def parse_scenario(text: str) -> GridWorld:
    """32 lines of 32 characters: '.' free, '#' obstacle, 'S' start, 'G' goal."""
    lines = [ln.rstrip("\n") for ln in text.splitlines() if ln.strip()]
    if not lines or any(len(ln) != len(lines[0]) for ln in lines):
        raise ContractError("scenario rows must be non-empty and equal length")
    occ = np.zeros((len(lines), len(lines[0])), dtype=bool)
    start = goal = None
    for r, ln in enumerate(lines):
        for c, ch in enumerate(ln):
            if ch == "#":
                occ[r, c] = True
            elif ch == "S":
                start = (r, c)
            elif ch == "G":
                goal = (r, c)
            elif ch != ".":
                raise ContractError(f"unexpected scenario character {ch!r} at {r},{c}")
    if start is None or goal is None:
        raise ContractError("scenario needs one S and one G")
    return GridWorld(occ, start, goal)


def format_scenario(grid: GridWorld) -> str:
    out = []
    for r in range(grid.shape[0]):
        row = []
        for c in range(grid.shape[1]):
            if (r, c) == grid.start:
                row.append("S")
            elif (r, c) == grid.goal:
                row.append("G")
            else:
                row.append("#" if grid.occupancy[r, c] else ".")
        out.append("".join(row))
    return "\n".join(out) + "\n"
