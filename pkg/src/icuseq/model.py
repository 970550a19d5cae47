"""Full sequence model: embeddings, encoder, pooling, and prediction heads."""
from __future__ import annotations

import dataclasses
from typing import Iterator, Mapping, Sequence

import numpy as np

from .autodiff import Tensor, add, matmul, parameter, take_rows
from .checkpoint import CheckpointData, load_checkpoint, save_checkpoint
from .config import ModelConfig
from .data import Vocabulary
from .embedding import (
    ComposedSequence,
    assemble_sequence,
    init_embedding_params,
    trunc_normal,
)
from .encoder import (
    attention_pool,
    encode,
    init_encoder_params,
    init_pool_params,
)
from .pipeline import EncodedStay

__all__ = [
    "SequenceModel",
    "PretrainHeads",
    "LinearHead",
    "save_model_checkpoint",
    "load_model_checkpoint",
]


class SequenceModel:
    """Embedding + sparse-attention encoder + attention pooling."""

    def __init__(self, cfg: ModelConfig, vocab: Vocabulary, seed: int = 0):
        self.cfg = cfg
        self.vocab = vocab
        rng = np.random.default_rng(seed)
        self.embedding = init_embedding_params(rng, vocab, cfg)
        self.encoder = init_encoder_params(rng, cfg)
        self.pool = init_pool_params(rng, cfg)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.embedding.named_parameters("embedding.")
        yield from self.encoder.named_parameters("encoder.")
        yield from self.pool.named_parameters("pool.")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def state(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def load_state(self, params: Mapping[str, np.ndarray]) -> None:
        own = self.state()
        missing = set(own) - set(params)
        extra = set(params) - set(own)
        if missing or extra:
            raise ValueError(
                f"parameter name mismatch: missing={sorted(missing)}, unexpected={sorted(extra)}"
            )
        for name, tensor in own.items():
            arr = np.asarray(params[name], dtype=np.float64)
            if arr.shape != tensor.data.shape:
                raise ValueError(
                    f"shape mismatch for {name}: checkpoint {arr.shape} vs model {tensor.data.shape}"
                )
            tensor.data = arr.copy()
            tensor.grad = None

    def forward_stay(
        self,
        enc: EncodedStay,
        mep_mask: np.ndarray | None = None,
        vp_mask: np.ndarray | None = None,
        ablate: Sequence[str] = (),
        training: bool = False,
        rng: np.random.Generator | None = None,
        pad_to: int | None = None,
    ) -> tuple[ComposedSequence, Tensor]:
        """Embed, encode; returns the composed sequence and (T, d) hidden states."""
        seq = assemble_sequence(
            enc, self.embedding, self.cfg,
            mep_mask=mep_mask, vp_mask=vp_mask, ablate=ablate, pad_to=pad_to,
        )
        hidden = encode(seq, self.encoder, self.cfg, training=training, rng=rng)
        return seq, hidden

    def pool_hidden(self, seq: ComposedSequence, hidden: Tensor) -> Tensor:
        return attention_pool(hidden, self.pool, seq.valid)


class LinearHead:
    """One linear readout (d_model -> n_out) on the pooled representation."""

    def __init__(self, rng: np.random.Generator, d_model: int, n_out: int, std: float = 0.02):
        self.w = parameter(trunc_normal(rng, (d_model, n_out), std))
        self.b = parameter(np.zeros(n_out))

    def __call__(self, pooled: Tensor) -> Tensor:
        return add(matmul(pooled, self.w), self.b)

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        self.w.name = f"{prefix}w"
        self.b.name = f"{prefix}b"
        yield f"{prefix}w", self.w
        yield f"{prefix}b", self.b


class PretrainHeads:
    """Masked-event classifier over the event vocabulary plus a value regressor."""

    def __init__(self, rng: np.random.Generator, cfg: ModelConfig, vocab: Vocabulary):
        self.event = LinearHead(rng, cfg.d_model, vocab.size("event_name"), cfg.init_std)
        self.value = LinearHead(rng, cfg.d_model, 1, cfg.init_std)

    def event_logits(self, hidden: Tensor, rows: np.ndarray) -> Tensor:
        return self.event(take_rows(hidden, rows))

    def value_preds(self, hidden: Tensor, rows: np.ndarray) -> Tensor:
        return self.value(take_rows(hidden, rows))

    def named_parameters(self, prefix: str = "pretrain_heads.") -> Iterator[tuple[str, Tensor]]:
        yield from self.event.named_parameters(f"{prefix}event.")
        yield from self.value.named_parameters(f"{prefix}value.")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]


def save_model_checkpoint(
    path,
    model: SequenceModel,
    head_params: Mapping[str, Tensor] | None = None,
    extra: dict | None = None,
) -> None:
    params: dict[str, Tensor] = {f"model.{k}": v for k, v in model.named_parameters()}
    if head_params:
        params.update(head_params)
    config = dataclasses.asdict(model.cfg)
    save_checkpoint(path, params, config=config, vocab=model.vocab.to_dict(), extra=extra)


def load_model_checkpoint(path) -> tuple[SequenceModel, dict[str, np.ndarray], CheckpointData]:
    """Rebuild the model from a checkpoint; returns leftover head params too."""
    ckpt = load_checkpoint(path)
    cfg = ModelConfig(**ckpt.config)
    vocab = Vocabulary.from_dict(ckpt.vocab)
    model = SequenceModel(cfg, vocab, seed=0)
    model_params = {
        k[len("model."):]: v for k, v in ckpt.params.items() if k.startswith("model.")
    }
    head_params = {k: v for k, v in ckpt.params.items() if not k.startswith("model.")}
    model.load_state(model_params)
    return model, head_params, ckpt
