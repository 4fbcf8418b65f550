"""In-context velocity-field transformer over three token streams.

Cells are tokens.  Stream 0 carries the noised query cells plus learnable
register tokens, stream 1 the observational and context interventional
cells, stream 2 the treatment codes.  Streams have separate projections and
feed-forwards and exchange information through joint attention; there is no
positional encoding, only role embeddings: a slot embedding shared between
a context experiment's cells and its treatment token, observational /
interventional flags, and a query flag.  Scalar integration time modulates
every block through zero-initialized FiLM projections.  Dropping the
condition replaces streams 1 and 2 by a single learnable null token.

The output is the velocity read from the non-register tokens of stream 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tensor
from .errors import InvalidArgumentError
from .layers import AttentionParams, film_modulate, gelu, joint_attention, layer_norm, linear, silu

_STREAMS = ("noise", "cells", "treat")


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    embed_dim: int = 64
    ff_dim: int = 128
    heads: int = 4
    head_dim: int = 16
    register_tokens: int = 4
    max_genes: int = 6
    max_context: int = 4
    condition_drop_prob: float = 0.2

    @property
    def time_dim(self) -> int:
        # Width of the time embedding feeding the FiLM projections.
        return 2 * self.embed_dim

    def validate(self) -> None:
        if self.heads * self.head_dim != self.embed_dim:
            raise InvalidArgumentError("heads * head_dim must equal embed_dim")


def toy_config(max_genes: int = 6, max_context: int = 4) -> ModelConfig:
    return ModelConfig(max_genes=max_genes, max_context=max_context)


def paper_config(max_genes: int = 20, max_context: int = 8) -> ModelConfig:
    return ModelConfig(
        layers=8,
        embed_dim=256,
        ff_dim=512,
        heads=4,
        head_dim=64,
        register_tokens=8,
        max_genes=max_genes,
        max_context=max_context,
    )


@dataclass(frozen=True)
class ExperimentBundle:
    """One prior draw: observations, K interventional context experiments,
    and a query treatment (with its target batch during training)."""

    y_obs: np.ndarray  # (N, d)
    context: tuple[tuple[np.ndarray, np.ndarray], ...]  # (code (d,), batch (M_k, d))
    query_code: np.ndarray  # (d,)
    target: Optional[np.ndarray] = None  # (M, d), training only
    context_slots: Optional[tuple[int, ...]] = None  # defaults to 0..K-1

    @property
    def k(self) -> int:
        return len(self.context)

    def slots(self) -> tuple[int, ...]:
        return self.context_slots if self.context_slots is not None else tuple(range(self.k))


@dataclass(frozen=True)
class NoisedQuery:
    y_tau: np.ndarray  # (M, d)
    tau: float


def build_model(cfg: ModelConfig, seed: int, dtype=np.float32) -> ParameterSet:
    """Allocate and initialize all learnable tensors, deterministically."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    params = ParameterSet()
    e, et, f, d = cfg.embed_dim, cfg.time_dim, cfg.ff_dim, cfg.max_genes

    def norm(name, shape, scale=0.02):
        params.add(name, (rng.standard_normal(shape) * scale).astype(dtype))

    def zeros(name, shape):
        params.add(name, np.zeros(shape, dtype=dtype))

    for s in _STREAMS:
        norm(f"in.{s}.w", (d, e))
        zeros(f"in.{s}.b", (e,))

    norm("time.l1.w", (1, et))
    zeros("time.l1.b", (et,))
    norm("time.l2.w", (et, et))
    zeros("time.l2.b", (et,))

    norm("emb.registers", (cfg.register_tokens, e))
    norm("emb.slot", (cfg.max_context, e))
    norm("emb.flag_obs", (e,))
    norm("emb.flag_int", (e,))
    norm("emb.flag_query", (e,))
    norm("emb.null", (e,))

    for layer in range(cfg.layers):
        for s in _STREAMS:
            base = f"blocks.{layer}.{s}"
            for proj in ("wq", "wk", "wv", "wo"):
                norm(f"{base}.attn.{proj}", (e, e))
            for proj in ("bq", "bk", "bv", "bo"):
                zeros(f"{base}.attn.{proj}", (e,))
            zeros(f"{base}.film_attn.w", (et, 2 * e))
            zeros(f"{base}.film_attn.b", (2 * e,))
            zeros(f"{base}.film_mlp.w", (et, 2 * e))
            zeros(f"{base}.film_mlp.b", (2 * e,))
            norm(f"{base}.ff.w1", (e, f))
            zeros(f"{base}.ff.b1", (f,))
            norm(f"{base}.ff.w2", (f, e))
            zeros(f"{base}.ff.b2", (e,))

    zeros("final.film.w", (et, 2 * e))
    zeros("final.film.b", (2 * e,))
    zeros("out.w", (e, d))  # zero-init readout: the initial velocity field is 0
    zeros("out.b", (d,))
    return params


def _time_embedding(params: ParameterSet, tau: float, dtype) -> Tensor:
    t = Tensor(np.array([[tau]], dtype=dtype))
    h = silu(linear(t, params["time.l1.w"], params["time.l1.b"]))
    return linear(h, params["time.l2.w"], params["time.l2.b"])


def _attention_params(params: ParameterSet, layer: int, stream: str) -> AttentionParams:
    base = f"blocks.{layer}.{stream}.attn"
    return AttentionParams(
        wq=params[f"{base}.wq"],
        wk=params[f"{base}.wk"],
        wv=params[f"{base}.wv"],
        wo=params[f"{base}.wo"],
        bq=params[f"{base}.bq"],
        bk=params[f"{base}.bk"],
        bv=params[f"{base}.bv"],
        bo=params[f"{base}.bo"],
    )


def forward(
    params: ParameterSet,
    cfg: ModelConfig,
    noised: NoisedQuery,
    bundle: ExperimentBundle,
    drop_condition: bool = False,
) -> Tensor:
    """Velocity prediction for the M noised query cells, shape (M, d)."""
    cfg.validate()
    d = cfg.max_genes
    dtype = params["out.w"].dtype
    y_tau = np.asarray(noised.y_tau, dtype=dtype)
    if y_tau.ndim != 2 or y_tau.shape[1] != d:
        raise InvalidArgumentError(f"query shape {y_tau.shape} does not match gene count {d}")
    if bundle.k > cfg.max_context:
        raise InvalidArgumentError(f"context size {bundle.k} exceeds max_context {cfg.max_context}")
    if bundle.y_obs.shape[1] != d or bundle.query_code.shape[0] != d:
        raise InvalidArgumentError("bundle width does not match the configured gene count")
    m = y_tau.shape[0]

    temb = _time_embedding(params, noised.tau, dtype)

    noise_tokens = ad.concat(
        [linear(Tensor(y_tau), params["in.noise.w"], params["in.noise.b"]), params["emb.registers"]],
        axis=0,
    )

    if drop_condition:
        null = params["emb.null"].reshape((1, cfg.embed_dim))
        streams = [noise_tokens, null]
        stream_names = ["noise", "cells"]
    else:
        cell_parts = [
            linear(Tensor(np.asarray(bundle.y_obs, dtype=dtype)), params["in.cells.w"], params["in.cells.b"])
            + params["emb.flag_obs"]
        ]
        slots = bundle.slots()
        for (code, batch), slot in zip(bundle.context, slots):
            if not 0 <= slot < cfg.max_context:
                raise InvalidArgumentError(f"slot {slot} out of range for max_context {cfg.max_context}")
            if batch.shape[1] != d or code.shape[0] != d:
                raise InvalidArgumentError("context widths do not match the configured gene count")
            tokens = linear(Tensor(np.asarray(batch, dtype=dtype)), params["in.cells.w"], params["in.cells.b"])
            cell_parts.append(tokens + params["emb.flag_int"] + params["emb.slot"][slot])
        cells = ad.concat(cell_parts, axis=0) if len(cell_parts) > 1 else cell_parts[0]

        codes = [np.asarray(c, dtype=dtype).reshape(1, d) for c, _ in bundle.context]
        codes.append(np.asarray(bundle.query_code, dtype=dtype).reshape(1, d))
        treat_tokens = linear(Tensor(np.concatenate(codes, axis=0)), params["in.treat.w"], params["in.treat.b"])
        parts = [
            treat_tokens[i : i + 1] + params["emb.slot"][slot] for i, slot in enumerate(slots)
        ]
        parts.append(treat_tokens[bundle.k :] + params["emb.flag_query"])
        treats = ad.concat(parts, axis=0) if len(parts) > 1 else parts[0]

        streams = [noise_tokens, cells, treats]
        stream_names = ["noise", "cells", "treat"]

    for layer in range(cfg.layers):
        attn_params = [_attention_params(params, layer, s) for s in stream_names]
        normed = [
            film_modulate(
                layer_norm(x),
                temb,
                params[f"blocks.{layer}.{s}.film_attn.w"],
                params[f"blocks.{layer}.{s}.film_attn.b"],
            )
            for x, s in zip(streams, stream_names)
        ]
        attended = joint_attention(normed, attn_params, cfg.heads, cfg.head_dim)
        streams = [x + a for x, a in zip(streams, attended)]
        updated = []
        for x, s in zip(streams, stream_names):
            h = film_modulate(
                layer_norm(x),
                temb,
                params[f"blocks.{layer}.{s}.film_mlp.w"],
                params[f"blocks.{layer}.{s}.film_mlp.b"],
            )
            h = linear(gelu(linear(h, params[f"blocks.{layer}.{s}.ff.w1"], params[f"blocks.{layer}.{s}.ff.b1"])),
                       params[f"blocks.{layer}.{s}.ff.w2"], params[f"blocks.{layer}.{s}.ff.b2"])
            updated.append(x + h)
        streams = updated

    head = film_modulate(layer_norm(streams[0][:m]), temb, params["final.film.w"], params["final.film.b"])
    return linear(head, params["out.w"], params["out.b"])
