"""Feature-compression pipeline: autoencoder, supervised fine-tune, stripped encoder.

Construction happens in two stages.  Stage 1 trains a symmetric autoencoder
(MSE, targets equal to inputs).  Stage 2 drops the decoder, attaches a 1-unit
sigmoid head after the 256-wide bottleneck, and fine-tunes every remaining
layer with binary cross-entropy; training hyperparameters carry over from
stage 1.  Stripping the head yields the deployed encoder, whose layers are
bitwise those of the fine-tuned model.

Hidden widths between the input and the bottleneck are configurable; defaults
taper 3072 -> 1024 -> 512 -> 256 (and analogously for the narrower inputs).
Hidden layers are ReLU; the bottleneck and the decoder output are linear so
the compressed space is unrestricted for distance matching.

A PCA baseline with the same output width ships alongside for comparisons.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datamodel import ENCODED_DIM, derive_seed
from .errors import CheckpointError, ValidationError
from .neuralnet import (Activation, DenseLayer, Network, build_network, init_layer,
                        load_network, network_to_bytes, predict, save_network, train)

REPLICATION_INPUT_DIMS = (1024, 2048, 3072)

_DEFAULT_SCHEDULES = {1024: (512,), 2048: (1024, 512), 3072: (1024, 512)}


def default_schedule(input_dim: int) -> tuple[int, ...]:
    return _DEFAULT_SCHEDULES.get(input_dim, ())


@dataclass(frozen=True)
class EncoderPipelineConfig:
    input_dim: int
    bottleneck: int = ENCODED_DIM
    hidden_schedule: tuple[int, ...] | None = None
    dropout: float = 0.2
    epochs: int = 10
    batch_size: int = 128
    learning_rate: float = 1e-3
    strict: bool = True  # enforce the replication dims (input in {1024,2048,3072}, bottleneck 256)

    def __post_init__(self):
        if self.hidden_schedule is None:
            object.__setattr__(self, "hidden_schedule", default_schedule(self.input_dim))
        else:
            object.__setattr__(self, "hidden_schedule", tuple(self.hidden_schedule))
        if self.strict:
            if self.input_dim not in REPLICATION_INPUT_DIMS:
                raise ValidationError(
                    f"input_dim must be one of {REPLICATION_INPUT_DIMS} "
                    f"(got {self.input_dim}); pass strict=False to override")
            if self.bottleneck != ENCODED_DIM:
                raise ValidationError(
                    f"bottleneck is fixed at {ENCODED_DIM} (got {self.bottleneck}); "
                    f"pass strict=False to override")
        widths = (self.input_dim, *self.hidden_schedule, self.bottleneck)
        for a, b in zip(widths, widths[1:]):
            if b >= a:
                raise ValidationError(
                    f"hidden_schedule must decrease strictly toward the bottleneck, "
                    f"got widths {widths}")
        if not (0.0 <= self.dropout < 1.0):
            raise ValidationError("dropout must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValidationError("epochs must be >= 0 and batch_size >= 1")

    @property
    def encoder_widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_schedule, self.bottleneck)

    @property
    def n_encoder_layers(self) -> int:
        return len(self.hidden_schedule) + 1

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "bottleneck": self.bottleneck,
                "hidden_schedule": list(self.hidden_schedule), "dropout": self.dropout,
                "epochs": self.epochs, "batch_size": self.batch_size,
                "learning_rate": self.learning_rate, "strict": self.strict}


def build_autoencoder(cfg: EncoderPipelineConfig, seed: int,
                      hidden_activation: Activation = Activation.RELU,
                      dtype=np.float32) -> Network:
    """Symmetric encoder/decoder around the bottleneck; decoder mirrors the schedule."""
    enc = list(cfg.encoder_widths)
    dims = enc + enc[-2::-1]
    acts = []
    for i in range(1, len(dims)):
        if dims[i] == cfg.bottleneck or i == len(dims) - 1:
            acts.append(Activation.LINEAR)  # unrestricted code and reconstruction
        else:
            acts.append(hidden_activation)
    return build_network(dims, acts, dropout_rate=cfg.dropout, seed=seed, dtype=dtype)


def train_step1_unsupervised(net: Network, vectors: np.ndarray,
                             cfg: EncoderPipelineConfig, seed: int,
                             ) -> tuple[Network, list[float]]:
    """Reconstruction training: MSE against the inputs themselves."""
    x = np.asarray(vectors)
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise ValidationError(f"vectors must be (rows, {cfg.input_dim}), got {x.shape}")
    return train(net, x, x, epochs=cfg.epochs, batch_size=cfg.batch_size,
                 loss_kind="mse", seed=seed, learning_rate=cfg.learning_rate)


def train_step2_finetune(autoencoder: Network, vectors: np.ndarray, labels: np.ndarray,
                         cfg: EncoderPipelineConfig, seed: int,
                         ) -> tuple[Network, list[float]]:
    """Drop the decoder, add a 1-unit sigmoid head, fine-tune everything with BCE."""
    x = np.asarray(vectors)
    y = np.asarray(labels).reshape(-1)
    if x.shape[0] != y.shape[0]:
        raise ValidationError("vectors/labels row counts differ")
    if not np.all(np.isin(y, (0, 1))):
        raise ValidationError("labels must be binary")
    n_enc = cfg.n_encoder_layers
    if len(autoencoder.layers) != 2 * n_enc:
        raise ValidationError("network does not look like this pipeline's autoencoder")
    enc_layers = [DenseLayer(l.weights.copy(), l.bias.copy(), l.activation)
                  for l in autoencoder.layers[:n_enc]]
    rng = np.random.default_rng(derive_seed(seed, "finetune-head"))
    head = init_layer(cfg.bottleneck, 1, Activation.SIGMOID, rng, dtype=autoencoder.dtype)
    net = Network(layers=enc_layers + [head], dropout_rate=cfg.dropout)
    net, history = train(net, x, y[:, None], epochs=cfg.epochs, batch_size=cfg.batch_size,
                         loss_kind="bce", seed=seed, learning_rate=cfg.learning_rate)
    return net, history


@dataclass(frozen=True)
class Encoder:
    """Deployed compressor: the fine-tuned encoder layers without the head."""

    net: Network
    input_dim: int
    bottleneck: int

    def encode(self, vectors: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(vectors))
        return predict(self.net, x).astype(np.float32)


def strip_to_encoder(model: Network, cfg: EncoderPipelineConfig,
                     allow_unfinetuned: bool = False) -> Encoder:
    """Remove the 1-unit head (or, for ablation, the whole decoder)."""
    n_enc = cfg.n_encoder_layers
    last = model.layers[-1]
    if len(model.layers) == n_enc + 1 and last.out_dim == 1:
        keep = model.layers[:n_enc]
    elif len(model.layers) == 2 * n_enc and last.out_dim == cfg.input_dim:
        if not allow_unfinetuned:
            raise ValidationError(
                "model has not been fine-tuned; pass allow_unfinetuned=True to strip "
                "a stage-1 autoencoder")
        keep = model.layers[:n_enc]
    else:
        raise ValidationError("model shape matches neither a fine-tuned encoder nor "
                              "this pipeline's autoencoder")
    net = Network(layers=[DenseLayer(l.weights.copy(), l.bias.copy(), l.activation)
                          for l in keep],
                  dropout_rate=0.0)
    return Encoder(net=net, input_dim=cfg.input_dim, bottleneck=cfg.bottleneck)


def predict_probability(finetuned: Network, vectors: np.ndarray) -> np.ndarray:
    """Head output of the fine-tuned model (exposed for diagnostics; the
    pipeline classifies via retrieval votes, not this probability)."""
    return predict(finetuned, np.atleast_2d(np.asarray(vectors))).reshape(-1)


def train_encoder_pipeline(cfg: EncoderPipelineConfig, vectors: np.ndarray,
                           labels: np.ndarray, seed: int,
                           ) -> tuple[Encoder, Network, dict]:
    """Run both stages and strip; returns (encoder, fine-tuned model, history)."""
    auto = build_autoencoder(cfg, seed=derive_seed(seed, "autoencoder-init"))
    auto, h1 = train_step1_unsupervised(auto, vectors, cfg, seed=derive_seed(seed, "step1"))
    finetuned, h2 = train_step2_finetune(auto, vectors, labels, cfg,
                                         seed=derive_seed(seed, "step2"))
    encoder = strip_to_encoder(finetuned, cfg)
    return encoder, finetuned, {"step1_loss": h1, "step2_loss": h2}


# ---------------------------------------------------------------------------
# encoder checkpoints (network file + JSON sidecar)

SIDECAR_VERSION = 1


def save_encoder(encoder: Encoder, cfg: EncoderPipelineConfig, path, *,
                 seed: int, fold: int | None = None, extra: dict | None = None) -> Path:
    """Write the encoder network plus a provenance sidecar ``<path>.json``."""
    path = Path(path)
    save_network(encoder.net, path)
    sidecar = {
        "version": SIDECAR_VERSION,
        "pipeline": cfg.to_dict(),
        "seed": seed,
        "fold": fold,
        "checkpoint_sha256": hashlib.sha256(network_to_bytes(encoder.net)).hexdigest(),
    }
    if extra:
        sidecar.update(extra)
    sidecar_path = path.with_suffix(path.suffix + ".json")
    sidecar_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n",
                            encoding="utf-8")
    return sidecar_path


def load_encoder(path) -> tuple[Encoder, dict]:
    path = Path(path)
    net = load_network(path)
    sidecar_path = path.with_suffix(path.suffix + ".json")
    if not sidecar_path.exists():
        raise CheckpointError(f"missing sidecar {sidecar_path}")
    sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
    digest = hashlib.sha256(network_to_bytes(net)).hexdigest()
    if sidecar.get("checkpoint_sha256") != digest:
        raise CheckpointError(f"{path}: sidecar checksum does not match the checkpoint")
    pipe = sidecar["pipeline"]
    return Encoder(net=net, input_dim=pipe["input_dim"], bottleneck=pipe["bottleneck"]), sidecar


# ---------------------------------------------------------------------------
# PCA baseline

@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray        # (d,)
    components: np.ndarray  # (d, k), orthonormal columns, descending eigenvalue
    eigenvalues: np.ndarray  # (k,)

    @property
    def k(self) -> int:
        return int(self.components.shape[1])


def pca_fit(vectors: np.ndarray, k: int = ENCODED_DIM, *, seed: int = 0,
            max_samples: int = 20000) -> PcaModel:
    """Top-k eigenvectors of the sample covariance.

    Fits on a seeded subsample when given more than ``max_samples`` rows.
    If the centered data has rank below k, the component count is truncated
    to the numerical rank.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValidationError("need a 2-D array with at least 2 rows")
    d = x.shape[1]
    if k > d:
        raise ValidationError(f"k={k} exceeds input dim {d}")
    if x.shape[0] > max_samples:
        rng = np.random.default_rng(seed)
        x = x[np.sort(rng.choice(x.shape[0], size=max_samples, replace=False))]
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (x.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    tol = max(evals[0], 0.0) * 1e-12
    rank = int(np.sum(evals > tol))
    k_eff = min(k, max(rank, 1))
    return PcaModel(mean=mean, components=np.ascontiguousarray(evecs[:, :k_eff]),
                    eigenvalues=evals[:k_eff].copy())


def pca_project(model: PcaModel, vectors: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    return (x - model.mean) @ model.components


def pca_reconstruct(model: PcaModel, codes: np.ndarray) -> np.ndarray:
    z = np.atleast_2d(np.asarray(codes, dtype=np.float64))
    return z @ model.components.T + model.mean
