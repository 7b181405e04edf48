"""
Six-channel object tensors, the compact reference network, the class-weighted loss
and the biased decision rule.
"""

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.metrics import confusion_matrix
from sklearn.model_selection import train_test_split
from torch.utils.data import DataLoader, TensorDataset

from src.holoflow.exceptions import RejectedInputError, UnsupportedFormatError
from src.holoflow.models import (
    ClassProbabilities, ClassScores, EpochMetrics, LossConfig, TrainConfig, TrainingMetrics,
)
from src.holoflow.tools.constants import GIARDIA, LABELS, NON_GIARDIA, TENSOR_CHANNELS, TENSOR_SIZE_PX
from src.holoflow.tools.reconstruct import ReconstructionStack
from src.holoflow.utils.logging_setup import get_logger

logger = get_logger(__name__)

LOG_CLAMP = 1e-12
MEDIAN_GUARD = 1e-6

WEIGHTS_MAGIC = b"HFCN"
WEIGHTS_VERSION = 1


# ========== TENSORS ==========

@dataclass(frozen=True)
class ObjectTensor:
    """Planes ordered intensity R, G, B then phase R, G, B, each median-normalized."""

    data: np.ndarray

    def __post_init__(self):
        expected = (len(TENSOR_CHANNELS), TENSOR_SIZE_PX, TENSOR_SIZE_PX)
        if self.data.shape != expected:
            raise RejectedInputError(f"object tensor must be {expected}, got {self.data.shape}")


def normalize_planes(planes: np.ndarray) -> np.ndarray:
    """Divide each plane by its median; planes with |median| <= 1e-6 pass through unscaled."""
    out = np.array(planes, dtype=np.float64, copy=True)
    for i, plane in enumerate(out):
        median = np.median(plane)
        if abs(median) > MEDIAN_GUARD:
            out[i] = plane / median
    return out


def assemble_tensor(stack: ReconstructionStack) -> ObjectTensor:
    n = stack.size_px
    if n < TENSOR_SIZE_PX:
        raise RejectedInputError(f"stack of {n} px is smaller than the {TENSOR_SIZE_PX} px tensor")
    lo = (n - TENSOR_SIZE_PX) // 2
    planes = stack.planes()[:, lo:lo + TENSOR_SIZE_PX, lo:lo + TENSOR_SIZE_PX]
    return ObjectTensor(normalize_planes(planes))


# ========== SCORES, LOSS, DECISION ==========

def softmax(scores: ClassScores) -> ClassProbabilities:
    z = np.array([scores.z_giardia, scores.z_non], dtype=np.float64)
    e = np.exp(z - z.max())
    p = e / e.sum()
    return ClassProbabilities(p_giardia=float(p[0]), p_non=float(p[1]))


def weighted_loss(probabilities: ClassProbabilities, label: Sequence[int], cfg: LossConfig) -> float:
    """Class-weighted cross entropy for a one-hot ``label`` (giardia, non)."""
    y_giardia, y_non = label
    return (
        -y_giardia * math.log(max(probabilities.p_giardia, LOG_CLAMP))
        - cfg.negative_class_weight * y_non * math.log(max(probabilities.p_non, LOG_CLAMP))
    )


def one_hot(label_index: int) -> Tuple[int, int]:
    return (1, 0) if label_index == GIARDIA else (0, 1)


def decide(scores: ClassScores, cfg: LossConfig) -> str:
    """Giardia only when its score beats the other by more than ``decision_bias``."""
    return LABELS[GIARDIA] if scores.z_giardia > scores.z_non + cfg.decision_bias else LABELS[NON_GIARDIA]


def batch_loss(logits: torch.Tensor, targets: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """Mean class-weighted loss over a batch of logits (autograd version of ``weighted_loss``)."""
    log_p = F.log_softmax(logits, dim=1).clamp(min=math.log(LOG_CLAMP))
    picked = log_p.gather(1, targets.view(-1, 1)).squeeze(1)
    weights = torch.where(
        targets == NON_GIARDIA,
        torch.full_like(picked, cfg.negative_class_weight),
        torch.ones_like(picked),
    )
    return -(weights * picked).mean()


# ========== NETWORK ==========

class CompactCystNet(nn.Module):
    """Strided 3x3 conv blocks, global average pool, linear head with two outputs."""

    def __init__(self, widths: Sequence[int] = (8, 16, 32, 64), in_channels: int = len(TENSOR_CHANNELS)):
        super().__init__()
        self.widths = tuple(int(w) for w in widths)
        layers = []
        previous = in_channels
        for width in self.widths:
            layers += [nn.Conv2d(previous, width, kernel_size=3, stride=2, padding=1), nn.SiLU()]
            previous = width
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.classifier = nn.Linear(previous, 2)

    def forward(self, x):
        x = self.features(x)
        x = self.pool(x).flatten(1)
        return self.classifier(x)


def zero_model(widths: Sequence[int] = (8, 16, 32, 64)) -> CompactCystNet:
    """Network with every parameter zero; scores every input (0, 0)."""
    model = CompactCystNet(widths)
    with torch.no_grad():
        for parameter in model.parameters():
            parameter.zero_()
    return model.eval()


def forward(tensor: ObjectTensor, model: nn.Module) -> ClassScores:
    if not isinstance(tensor, ObjectTensor):
        tensor = ObjectTensor(np.asarray(tensor))
    z_giardia, z_non = score_batch(model, tensor.data[None])[0]
    return ClassScores(z_giardia=float(z_giardia), z_non=float(z_non))


def score_batch(model: nn.Module, tensors: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Logits (z_giardia, z_non) for a stack of (6, H, W) tensors, as float64."""
    dtype = next(model.parameters()).dtype
    model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(tensors), batch_size):
            batch = torch.as_tensor(np.asarray(tensors[start:start + batch_size]), dtype=dtype)
            out.append(model(batch).double().numpy())
    return np.concatenate(out) if out else np.zeros((0, 2))


# ========== TRAINING ==========

def _decide_array(logits: np.ndarray, bias: float) -> np.ndarray:
    return np.where(logits[:, 0] > logits[:, 1] + bias, GIARDIA, NON_GIARDIA)


def train(tensors: np.ndarray, labels: Sequence[int], cfg: TrainConfig, loss_cfg: LossConfig,
          metrics_path: Optional[str] = None) -> Tuple[CompactCystNet, TrainingMetrics]:
    """Seeded stratified split, Adam on the weighted loss, per-epoch JSONL metrics.

    Labels are class indices (0 = giardia, 1 = non-giardia).
    """
    labels = np.asarray(labels, dtype=np.int64)
    counts = [int((labels == c).sum()) for c in (GIARDIA, NON_GIARDIA)]
    if min(counts) == 0:
        raise RejectedInputError(f"training needs both classes, got counts {counts}")
    if min(counts) < cfg.min_examples_per_class:
        raise RejectedInputError(f"need >= {cfg.min_examples_per_class} examples per class, got {counts}")

    torch.manual_seed(cfg.seed)
    indices = np.arange(len(labels))
    train_idx, val_idx = train_test_split(
        indices, train_size=cfg.split, stratify=labels, random_state=cfg.seed, shuffle=True
    )
    x = torch.as_tensor(np.asarray(tensors), dtype=torch.float32)
    y = torch.as_tensor(labels)
    loader = DataLoader(
        TensorDataset(x[train_idx], y[train_idx]),
        batch_size=cfg.batch_size, shuffle=True,
        generator=torch.Generator().manual_seed(cfg.seed),
    )

    model = CompactCystNet(cfg.widths)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    metrics = TrainingMetrics(train_size=len(train_idx), val_size=len(val_idx))
    sink = open(metrics_path, "w", encoding="utf-8") if metrics_path else None

    try:
        for epoch in range(cfg.epochs):
            model.train()
            total, seen = 0.0, 0
            for xb, yb in loader:
                optimizer.zero_grad()
                loss = batch_loss(model(xb), yb, loss_cfg)
                loss.backward()
                optimizer.step()
                total += float(loss) * len(yb)
                seen += len(yb)

            model.eval()
            with torch.no_grad():
                val_logits = model(x[val_idx])
                val_loss = float(batch_loss(val_logits, y[val_idx], loss_cfg))
            val_pred = val_logits.argmax(dim=1).numpy()
            record = EpochMetrics(
                epoch=epoch + 1,
                train_loss=total / max(seen, 1),
                val_loss=val_loss,
                val_accuracy=float((val_pred == labels[val_idx]).mean()),
            )
            metrics.epochs.append(record)
            logger.debug(f"epoch {record.epoch}: train {record.train_loss:.4f} val {val_loss:.4f} "
                         f"acc {record.val_accuracy:.3f}")
            if sink:
                sink.write(json.dumps(record.model_dump(), sort_keys=True) + "\n")
    finally:
        if sink:
            sink.close()

    # Confusion matrix at the biased decision threshold
    final_logits = score_batch(model, np.asarray(tensors)[val_idx])
    predicted = _decide_array(final_logits, loss_cfg.decision_bias)
    cm = confusion_matrix(labels[val_idx], predicted, labels=[GIARDIA, NON_GIARDIA])
    metrics.confusion_matrix = cm.tolist()
    metrics.val_accuracy = float(np.trace(cm) / cm.sum())
    metrics.val_recall = float(cm[0, 0] / max(cm[0].sum(), 1))
    metrics.val_false_positive_rate = float(cm[1, 0] / max(cm[1].sum(), 1))
    return model.eval(), metrics


def false_positive_rate(model: nn.Module, negative_set: Sequence, cfg: LossConfig) -> float:
    """Fraction of non-target tensors the biased rule labels giardia."""
    if len(negative_set) == 0:
        raise RejectedInputError("negative set is empty")
    data = np.stack([t.data if isinstance(t, ObjectTensor) else np.asarray(t) for t in negative_set])
    logits = score_batch(model, data)
    return float((_decide_array(logits, cfg.decision_bias) == GIARDIA).mean())


def suggested_offset_fraction(fp_rate: float) -> float:
    """Offset allowance of twice the measured false-positive rate, capped at 5%."""
    return min(0.05, 2.0 * fp_rate)


# ========== WEIGHTS FILE ==========

def write_weights(model: CompactCystNet, path):
    """HFCN v1: header, per-tensor name and dims, then little-endian float32 blobs."""
    state = model.state_dict()
    header = [WEIGHTS_MAGIC, struct.pack("<II", WEIGHTS_VERSION, len(state))]
    blobs = []
    for name, tensor in state.items():
        encoded = name.encode("utf-8")
        header.append(struct.pack("<H", len(encoded)) + encoded)
        header.append(struct.pack("<I", tensor.dim()) + struct.pack(f"<{tensor.dim()}I", *tensor.shape))
        blobs.append(tensor.detach().cpu().numpy().astype("<f4").tobytes())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(b"".join(header + blobs))


def read_weights(path) -> CompactCystNet:
    payload = Path(path).read_bytes()
    if payload[:4] != WEIGHTS_MAGIC:
        raise UnsupportedFormatError(f"{path}: not a weights file")
    version, count = struct.unpack_from("<II", payload, 4)
    if version != WEIGHTS_VERSION:
        raise UnsupportedFormatError(f"{path}: weights version {version} is not supported")

    offset = 12
    shapes: List[Tuple[str, Tuple[int, ...]]] = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", payload, offset)
        name = payload[offset + 2:offset + 2 + name_len].decode("utf-8")
        offset += 2 + name_len
        (ndim,) = struct.unpack_from("<I", payload, offset)
        dims = struct.unpack_from(f"<{ndim}I", payload, offset + 4)
        offset += 4 + 4 * ndim
        shapes.append((name, tuple(dims)))

    state = {}
    for name, dims in shapes:
        size = int(np.prod(dims)) if dims else 1
        values = np.frombuffer(payload, dtype="<f4", count=size, offset=offset).reshape(dims)
        state[name] = torch.from_numpy(values.astype(np.float32))
        offset += 4 * size

    # Conv weights are features.<2k>.weight with shape (width, in, 3, 3)
    conv_names = sorted(
        (n for n in state if n.startswith("features.") and n.endswith(".weight")),
        key=lambda n: int(n.split(".")[1]),
    )
    model = CompactCystNet([state[n].shape[0] for n in conv_names], in_channels=state[conv_names[0]].shape[1])
    model.load_state_dict(state)
    return model.eval()
