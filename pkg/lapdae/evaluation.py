"""
Evaluation of learned representations

Reconstruction quality, nearest-neighbour retrieval, the frozen-backbone
linear probe, embedding export for external projection tools and the
first-layer kernel dump. Every metric row is tagged with the parameter
fingerprint of the checkpoint it was computed from.
"""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from lapdae.data import Dataset
from lapdae.errors import LapDAEError, StorageError, UsageError
from lapdae.images import kernel_tiles, save_image, stack_rows, tile_grid, upscale
from lapdae.model import DEFAULT_EMBEDDING_BUDGET, ModelParams, autoencode, extract_embedding
from lapdae.optim import CLEAN, LAPLACIAN, SPATIAL, AdamState, adam_step, corrupt_batch, held_out_mse
from lapdae.pyramid import CorruptionSpec
from lapdae.tensor_core import GradTape, Tensor, linear, softmax_cross_entropy

logger = logging.getLogger(__name__)

METRICS = ("recon", "knn", "probe")
RECON_CORRUPTIONS = (LAPLACIAN, SPATIAL, CLEAN)
REPORT_COLUMNS = ["metric", "split", "layer", "value", "checkpoint", "seed"]
DISTANCE_METRICS = ("euclidean", "cosine")
PROBE_LR = 1e-3
PROBE_EPOCHS = 20
PROBE_BATCH_SIZE = 128
DEFAULT_K = 5
RETRIEVAL_QUERIES = 10


@dataclass
class ReportEntry:
    metric: str
    split: str
    layer: str
    value: float
    checkpoint: str
    seed: int


@dataclass
class EvalReport:
    entries: List[ReportEntry] = field(default_factory=list)

    def add(self, metric: str, split: str, layer: str, value: float, checkpoint: str, seed: int) -> ReportEntry:
        if not checkpoint:
            raise UsageError(f"Report entry '{metric}' needs the checkpoint fingerprint it was computed from")
        entry = ReportEntry(metric, split, layer, float(value), checkpoint, int(seed))
        self.entries.append(entry)
        return entry

    def __len__(self) -> int:
        return len(self.entries)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(e) for e in self.entries], columns=REPORT_COLUMNS)

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            self.to_frame().to_csv(path, index=False)
        except OSError as e:
            raise StorageError(f"Cannot write report {path}: {e}") from e
        return path

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "EvalReport":
        frame = pd.read_csv(path, dtype={"checkpoint": str})
        return cls([ReportEntry(**row) for row in frame.to_dict(orient="records")])

    def table(self) -> str:
        if not self.entries:
            return "(no metrics)"
        return self.to_frame().to_string(index=False)


def parse_metrics(text: Union[str, Sequence[str]]) -> List[str]:
    """Split 'recon,knn,probe' and validate each name"""
    names = [n.strip() for n in (text.split(",") if isinstance(text, str) else text) if n.strip()]
    unknown = [n for n in names if n not in METRICS]
    if unknown or not names:
        raise UsageError(f"Unknown metric(s) {', '.join(unknown) or '(none given)'}; valid metrics: {', '.join(METRICS)}")
    return names


def _images(dataset: Union[Dataset, np.ndarray]) -> np.ndarray:
    return dataset.images if isinstance(dataset, Dataset) else np.asarray(dataset, dtype=np.float32)


# --- reconstruction -----------------------------------------------------------------------------------------------

def reconstruction_mse(params: Optional[ModelParams], dataset: Union[Dataset, np.ndarray], corruption: str,
                       spec: Optional[CorruptionSpec] = None, levels: int = 5, seed: int = 0,
                       forward: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                       batch_size: int = 256) -> float:
    """
    Mean per-pixel squared error of reconstructions of corrupted inputs against the clean images

    Args:
        params: Trained parameters
        dataset: Evaluation images (test split)
        corruption: laplacian, spatial or none
        spec: Corruption parameters (sigma, level); defaults to sigma 25 at a random level
        levels: Pyramid depth for laplacian corruption
        seed: Corruption seed
        forward: Optional replacement for the autoencoder forward pass
        batch_size: Images per forward pass

    Returns:
        Scalar MSE
    """
    if corruption not in RECON_CORRUPTIONS:
        raise UsageError(f"Unknown corruption '{corruption}' (valid: {', '.join(RECON_CORRUPTIONS)})")
    value = held_out_mse(params, _images(dataset), corruption, spec or CorruptionSpec(), levels, seed,
                         batch_size=batch_size, forward=forward)
    logger.info(f"Reconstruction MSE ({corruption}): {value:.6f}")
    return value


def reconstruction_grid(params: ModelParams, dataset: Union[Dataset, np.ndarray], corruption: str,
                        path: Union[str, Path], spec: Optional[CorruptionSpec] = None, levels: int = 5,
                        seed: int = 0, count: int = 8) -> Path:
    """Three-row grid: clean / corrupted / reconstruction for the first ``count`` images"""
    clean = _images(dataset)[:count]
    corrupted, _ = corrupt_batch(clean, np.arange(clean.shape[0]), (spec or CorruptionSpec(),), corruption,
                                 levels, seed, 0)
    reconstructed = autoencode(params, corrupted[0]).data
    return save_image(stack_rows([list(clean), list(corrupted[0]), list(reconstructed)]), path)


# --- retrieval ----------------------------------------------------------------------------------------------------

@dataclass
class KnnResult:
    precision: float
    query_indices: np.ndarray
    neighbors: np.ndarray
    per_query: np.ndarray
    k: int
    metric: str


def _pairwise_distances(queries: np.ndarray, gallery: np.ndarray, metric: str) -> np.ndarray:
    if metric == "cosine":
        q = queries / np.maximum(np.linalg.norm(queries, axis=1, keepdims=True), 1e-12)
        g = gallery / np.maximum(np.linalg.norm(gallery, axis=1, keepdims=True), 1e-12)
        return 1.0 - q @ g.T
    squared = (np.sum(queries ** 2, axis=1)[:, None] + np.sum(gallery ** 2, axis=1)[None, :]
               - 2.0 * queries @ gallery.T)
    return np.sqrt(np.maximum(squared, 0.0))


def knn_precision(embeddings: np.ndarray, labels: np.ndarray, k: int = DEFAULT_K,
                  query_indices: Optional[Sequence[int]] = None, metric: str = "euclidean",
                  chunk_size: int = 256) -> KnnResult:
    """
    Precision@k of nearest-neighbour retrieval; each query is removed from its own gallery

    Args:
        embeddings: (N, D) codes
        labels: (N,) class labels
        k: Neighbours per query
        query_indices: Rows used as queries (default: all)
        metric: euclidean (raw codes) or cosine
        chunk_size: Queries per distance block

    Returns:
        KnnResult with the mean precision and the neighbour lists (Q, k)
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if metric not in DISTANCE_METRICS:
        raise UsageError(f"Unknown distance '{metric}' (valid: {', '.join(DISTANCE_METRICS)})")
    gallery_size = embeddings.shape[0] - 1
    if k < 1 or k >= gallery_size:
        raise UsageError(f"k={k} must be >= 1 and smaller than the gallery size {gallery_size}")
    queries = np.arange(embeddings.shape[0]) if query_indices is None else np.asarray(query_indices, dtype=np.int64)

    neighbors = np.empty((queries.size, k), dtype=np.int64)
    for start in range(0, queries.size, chunk_size):
        block = queries[start:start + chunk_size]
        distances = _pairwise_distances(embeddings[block], embeddings, metric)
        distances[np.arange(block.size), block] = np.inf
        neighbors[start:start + block.size] = np.argsort(distances, axis=1, kind="stable")[:, :k]
    per_query = (labels[neighbors] == labels[queries][:, None]).mean(axis=1)
    return KnnResult(float(per_query.mean()), queries, neighbors, per_query, k, metric)


def select_queries(count: int, total: int, seed: int) -> np.ndarray:
    """Fixed, sorted query indices drawn without replacement"""
    if count is None or count >= total:
        return np.arange(total)
    return np.sort(np.random.default_rng(seed).choice(total, size=count, replace=False))


def knn_retrieval(params: Optional[ModelParams], dataset: Dataset, k: int = DEFAULT_K, layer: str = "bottleneck",
                  num_queries: Optional[int] = None, seed: int = 0, metric: str = "euclidean",
                  budget: Optional[int] = None, workers: int = 1,
                  grid_path: Optional[Union[str, Path]] = None, grid_queries: int = RETRIEVAL_QUERIES) -> KnnResult:
    """
    Embed the test split and score precision@k over the chosen queries

    With ``grid_path`` the same embeddings also produce the retrieval grid for
    ``grid_queries`` fixed queries.
    """
    embeddings = extract_embedding(params, dataset.images, layer, budget=budget, workers=workers)
    result = knn_precision(embeddings, dataset.labels, k, select_queries(num_queries, len(dataset), seed), metric)
    logger.info(f"precision@{k} ({layer}, {metric}) over {result.query_indices.size} queries: {result.precision:.4f}")
    if grid_path is not None:
        shown = knn_precision(embeddings, dataset.labels, k, select_queries(grid_queries, len(dataset), seed), metric)
        retrieval_grid(dataset, shown, grid_path, queries=grid_queries)
    return result


def retrieval_grid(dataset: Dataset, result: KnnResult, path: Union[str, Path],
                   queries: int = RETRIEVAL_QUERIES) -> Path:
    """One row per query: the query image followed by its k retrieved images"""
    rows = []
    for row, query in enumerate(result.query_indices[:queries]):
        rows.append([dataset.images[query]] + [dataset.images[n] for n in result.neighbors[row]])
    return save_image(stack_rows(rows), path)


# --- linear probe -------------------------------------------------------------------------------------------------

@dataclass
class ProbeResult:
    accuracy: float
    train_accuracy: float
    losses: List[float]
    feature_dim: int


def _standardize(train: np.ndarray, test: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mean = train.mean(axis=0, keepdims=True)
    std = train.std(axis=0, keepdims=True)
    std[std == 0] = 1.0
    return ((train - mean) / std).astype(np.float32), ((test - mean) / std).astype(np.float32)


def fit_softmax_probe(train_x: np.ndarray, train_y: np.ndarray, num_classes: int, epochs: int = PROBE_EPOCHS,
                      lr: float = PROBE_LR, batch_size: int = PROBE_BATCH_SIZE,
                      seed: int = 0) -> Tuple[Dict[str, Tensor], List[float]]:
    """Multinomial logistic regression trained with Adam on fixed features"""
    rng = np.random.default_rng(seed)
    weights = {
        "probe.weight": Tensor(np.zeros((train_x.shape[1], num_classes), dtype=np.float32), requires_grad=True,
                               name="probe.weight"),
        "probe.bias": Tensor(np.zeros(num_classes, dtype=np.float32), requires_grad=True, name="probe.bias"),
    }
    state = AdamState.fresh(weights)
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(train_x.shape[0])
        epoch_loss = 0.0
        for start in range(0, order.size, batch_size):
            rows = order[start:start + batch_size]
            with GradTape() as tape:
                loss = softmax_cross_entropy(linear(train_x[rows], weights["probe.weight"], weights["probe.bias"]),
                                             train_y[rows])
            grads = tape.backward(loss)
            adam_step(weights, {name: grads[t] for name, t in weights.items() if t in grads}, state, lr)
            epoch_loss += loss.item() * rows.size
        losses.append(epoch_loss / order.size)
        logger.debug(f"probe epoch {epoch + 1}/{epochs} loss {losses[-1]:.4f}")
    return weights, losses


def _accuracy(weights: Dict[str, Tensor], x: np.ndarray, y: np.ndarray) -> float:
    logits = x @ weights["probe.weight"].data + weights["probe.bias"].data
    return float(np.mean(np.argmax(logits, axis=1) == y))


def linear_probe(params: Optional[ModelParams], train: Dataset, test: Dataset, layer: str = "bottleneck",
                 budget: int = DEFAULT_EMBEDDING_BUDGET, epochs: int = PROBE_EPOCHS, lr: float = PROBE_LR,
                 batch_size: int = PROBE_BATCH_SIZE, seed: int = 0, workers: int = 1) -> ProbeResult:
    """
    Top-1 test accuracy of a linear classifier on frozen features of one layer

    Features are pooled to at most ``budget`` elements and standardised with
    train-split statistics. The backbone is checksummed before and after.

    Args:
        params: Frozen backbone (None with layer="pixels")
        train: Split the classifier is fitted on
        test: Split the accuracy is reported on
        layer: conv1..conv4, bottleneck or pixels
        budget: Feature element budget
        epochs: Probe epochs
        lr: Probe Adam learning rate
        batch_size: Probe mini-batch size
        seed: Shuffling seed
        workers: Threads for feature extraction

    Returns:
        ProbeResult with the test accuracy
    """
    before = params.checksum() if params is not None else None
    train_x = extract_embedding(params, train.images, layer, budget=budget, workers=workers)
    test_x = extract_embedding(params, test.images, layer, budget=budget, workers=workers)
    train_x, test_x = _standardize(train_x, test_x)
    num_classes = int(max(train.labels.max(), test.labels.max())) + 1

    weights, losses = fit_softmax_probe(train_x, train.labels, num_classes, epochs, lr, batch_size, seed)
    if params is not None and params.checksum() != before:
        raise LapDAEError("Linear probe modified the frozen backbone parameters")
    result = ProbeResult(_accuracy(weights, test_x, test.labels), _accuracy(weights, train_x, train.labels),
                         losses, train_x.shape[1])
    logger.info(f"Linear probe on {layer} ({result.feature_dim} features): top-1 {result.accuracy:.4f}")
    return result


# --- exports ------------------------------------------------------------------------------------------------------

def export_embeddings(params: Optional[ModelParams], dataset: Dataset, layer: str, path: Union[str, Path],
                      checkpoint: str = "", budget: Optional[int] = None, workers: int = 1) -> Path:
    """
    Write one TSV row per sample: label followed by the layer's features

    The first line is a comment naming the layer and the checkpoint fingerprint.

    Raises:
        StorageError: Path not writable
    """
    path = Path(path)
    features = extract_embedding(params, dataset.images, layer, budget=budget, workers=workers)
    frame = pd.DataFrame(features, columns=[f"{layer}_{i}" for i in range(features.shape[1])])
    frame.insert(0, "label", dataset.labels)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(f"# layer={layer} checkpoint={checkpoint or 'none'}\n")
            frame.to_csv(f, sep="\t", index=False, float_format="%.9g")
    except OSError as e:
        raise StorageError(f"Cannot write embeddings {path}: {e}") from e
    logger.info(f"Exported {features.shape[0]} x {features.shape[1]} {layer} embeddings to {path}")
    return path


def load_embeddings(path: Union[str, Path]) -> Tuple[Dict[str, str], np.ndarray, np.ndarray]:
    """Read an exported TSV back as (metadata, labels, features)"""
    with open(path, encoding="utf-8") as f:
        header = f.readline().lstrip("#").split()
    meta = dict(item.split("=", 1) for item in header)
    frame = pd.read_csv(path, sep="\t", skiprows=1)
    return meta, frame["label"].to_numpy(), frame.drop(columns="label").to_numpy(dtype=np.float32)


def dump_first_layer_kernels(params: ModelParams, path: Union[str, Path], columns: int = 8,
                             scale: int = 1) -> np.ndarray:
    """
    Tile the first encoder layer's kernels, each normalised to [0, 1] on its own

    Returns:
        The unscaled grid (C, H, W) that was written to ``path``
    """
    first = params.arch.encoder[0]
    tiles = kernel_tiles(params[f"{first.name}.weight"].data)
    grid = tile_grid(tiles, columns)
    save_image(upscale(grid, scale), path)
    return grid
