"""Dataset generation, persistence, and training-bundle assembly.

A dataset is a collection of contexts (one causal model each) with an
observational batch and one interventional batch per treatment.  Every
batch's seed derives from (base_seed, context, treatment, role), so any
subset of conditions can be produced independently: generation with any
worker count is bit-identical to serial generation.

Counterfactually paired datasets reuse the observational noise (or the
simulation seed, for expression data) across all treatments of a context.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from . import dataio, grn as grnmod, scm as scmmod
from .errors import InvalidArgumentError
from .model import ExperimentBundle
from .seeding import (
    ROLE_INT_NOISE,
    ROLE_OBS_NOISE,
    ROLE_STRUCTURE,
    ROLE_TECH_NOISE,
    ROLE_TREATMENT,
    mix_seed,
)

SCM_KIND = "scm"
GRN_KIND = "grn"


@dataclass(frozen=True)
class ConditionKey:
    context_id: int
    treatment_id: int


@dataclass
class PerturbationDataset:
    """In-memory dataset: per-context observational and per-condition
    interventional batches plus their treatment codes."""

    kind: str
    d: int
    n: int
    paired: bool
    base_seed: int
    observational: dict[int, np.ndarray] = field(default_factory=dict)
    interventional: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    treatment_codes: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)

    @property
    def conditions(self) -> list[ConditionKey]:
        return [ConditionKey(c, t) for c, t in sorted(self.interventional)]

    def contexts(self) -> list[int]:
        return sorted(self.observational)

    def treatments_of(self, context_id: int) -> list[int]:
        return sorted(t for c, t in self.interventional if c == context_id)


# -- linear SCM datasets -----------------------------------------------------


def _scm_context(args) -> tuple[int, np.ndarray, dict[int, np.ndarray], dict[int, np.ndarray]]:
    context_id, d, n, edge_prob, paired, base_seed = args
    rng = np.random.default_rng(mix_seed(base_seed, context_id, 0, ROLE_STRUCTURE))
    dag = scmmod.sample_dag(d, edge_prob, rng)
    obs_seed = mix_seed(base_seed, context_id, 0, ROLE_OBS_NOISE)
    obs = scmmod.sample_observational(dag, n, obs_seed).values
    # Pairing reuses the observational noise matrix for every treatment.
    shared = np.random.default_rng(obs_seed).standard_normal((n, d)) if paired else None

    batches: dict[int, np.ndarray] = {}
    codes: dict[int, np.ndarray] = {}
    for target in range(d):
        value_rng = np.random.default_rng(mix_seed(base_seed, context_id, target, ROLE_TREATMENT))
        iv = scmmod.Intervention(target, scmmod.sample_intervention_value(value_rng))
        int_seed = mix_seed(base_seed, context_id, target, ROLE_INT_NOISE)
        batch = scmmod.sample_interventional(dag, iv, n, int_seed, paired_noise=shared)
        batches[target] = batch.values
        codes[target] = scmmod.encode_treatment(iv, d)
    return context_id, obs, batches, codes


def generate_scm_dataset(
    n_contexts: int,
    d: int,
    n_samples: int,
    edge_prob: float = 0.5,
    paired: bool = False,
    base_seed: int = 0,
    workers: int = 1,
) -> PerturbationDataset:
    """Sample linear-model contexts with one intervention per node."""
    if n_contexts < 1:
        raise InvalidArgumentError("n_contexts must be >= 1")
    ds = PerturbationDataset(kind=SCM_KIND, d=d, n=n_samples, paired=paired, base_seed=base_seed)
    jobs = [(c, d, n_samples, edge_prob, paired, base_seed) for c in range(n_contexts)]
    for context_id, obs, batches, codes in _run_jobs(_scm_context, jobs, workers):
        ds.observational[context_id] = obs
        for t, batch in batches.items():
            ds.interventional[(context_id, t)] = batch
            ds.treatment_codes[(context_id, t)] = codes[t]
    return ds


# -- expression (regulatory network) datasets --------------------------------


def _grn_context(args):
    context_id, genes, n_cells, paired, base_seed, preprocess = args
    rng = np.random.default_rng(mix_seed(base_seed, context_id, 0, ROLE_STRUCTURE))
    grn_cfg = grnmod.sample_grn_config(genes, rng)
    sergio_cfg = grnmod.sample_sergio_config(rng)
    network = grnmod.sample_simulation_ready_grn(grn_cfg, rng)

    def seeds(treatment: int) -> tuple[int, int]:
        if paired:  # one simulation/noise stream shared across all treatments
            return (
                mix_seed(base_seed, context_id, 0, ROLE_OBS_NOISE),
                mix_seed(base_seed, context_id, 0, ROLE_TECH_NOISE),
            )
        return (
            mix_seed(base_seed, context_id, treatment, ROLE_INT_NOISE),
            mix_seed(base_seed, context_id, treatment, ROLE_TECH_NOISE),
        )

    def condition(network_variant, treatment: int) -> np.ndarray:
        sim_seed, tech_seed = seeds(treatment)
        clean = grnmod.simulate_expression(network_variant, sergio_cfg, n_cells, sim_seed)
        counts = grnmod.apply_technical_noise(clean, sergio_cfg, tech_seed)
        return median_count_log_normalize(counts) if preprocess else counts.astype(float)

    obs_sim, obs_tech = (
        mix_seed(base_seed, context_id, 0, ROLE_OBS_NOISE),
        mix_seed(base_seed, context_id, 0, ROLE_TECH_NOISE),
    )
    clean = grnmod.simulate_expression(network, sergio_cfg, n_cells, obs_sim)
    counts = grnmod.apply_technical_noise(clean, sergio_cfg, obs_tech)
    obs = median_count_log_normalize(counts) if preprocess else counts.astype(float)

    batches: dict[int, np.ndarray] = {}
    codes: dict[int, np.ndarray] = {}
    for gene in range(genes):
        batches[gene] = condition(grnmod.knockout(network, gene), gene + 1)
        code = np.zeros(genes)
        code[gene] = 1.0  # knockouts carry no efficiency scalar
        codes[gene] = code
    return context_id, obs, batches, codes


def generate_grn_dataset(
    n_contexts: int,
    genes: int,
    n_cells: int,
    paired: bool = False,
    base_seed: int = 0,
    preprocess: bool = True,
    workers: int = 1,
) -> PerturbationDataset:
    """Simulate expression contexts with one knockout per gene."""
    if n_contexts < 1:
        raise InvalidArgumentError("n_contexts must be >= 1")
    ds = PerturbationDataset(kind=GRN_KIND, d=genes, n=n_cells, paired=paired, base_seed=base_seed)
    jobs = [(c, genes, n_cells, paired, base_seed, preprocess) for c in range(n_contexts)]
    for context_id, obs, batches, codes in _run_jobs(_grn_context, jobs, workers):
        ds.observational[context_id] = obs
        for t, batch in batches.items():
            ds.interventional[(context_id, t)] = batch
            ds.treatment_codes[(context_id, t)] = codes[t]
    return ds


def _run_jobs(fn, jobs, workers: int):
    if workers <= 1:
        return [fn(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def median_count_log_normalize(counts: np.ndarray) -> np.ndarray:
    """Scale each cell's counts to the median total, then log2(1 + x).

    Cells with zero total are left unscaled (their row stays zero).
    """
    counts = np.asarray(counts, dtype=float)
    if np.any(counts < 0):
        raise InvalidArgumentError("counts must be non-negative")
    totals = counts.sum(axis=1)
    median = np.median(totals)
    scale = np.where(totals > 0, median / np.maximum(totals, 1e-12), 1.0)
    return np.log2(1.0 + counts * scale[:, None])


# -- persistence ---------------------------------------------------------------


def save_dataset(ds: PerturbationDataset, outdir: Path) -> None:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    entries = []
    for context_id in ds.contexts():
        fname = f"ctx{context_id:05d}_obs.bin"
        dataio.write_batch_file(
            outdir / fname, ds.observational[context_id], dataio.KIND_OBSERVATIONAL, np.zeros(ds.d)
        )
        entries.append(
            {
                "context": context_id,
                "treatment": None,
                "kind": "obs",
                "file": fname,
                "seed": mix_seed(ds.base_seed, context_id, 0, ROLE_OBS_NOISE),
            }
        )
    for key in sorted(ds.interventional):
        context_id, treatment = key
        fname = f"ctx{context_id:05d}_t{treatment:05d}.bin"
        dataio.write_batch_file(
            outdir / fname, ds.interventional[key], dataio.KIND_INTERVENTIONAL, ds.treatment_codes[key]
        )
        entries.append(
            {
                "context": context_id,
                "treatment": treatment,
                "kind": "int",
                "file": fname,
                "seed": mix_seed(ds.base_seed, context_id, treatment, ROLE_INT_NOISE),
            }
        )
    dataio.write_manifest(
        outdir / "manifest.json",
        {
            "format": 1,
            "kind": ds.kind,
            "d": ds.d,
            "n": ds.n,
            "paired": ds.paired,
            "base_seed": ds.base_seed,
            "conditions": entries,
        },
    )


def load_dataset(path: Path) -> PerturbationDataset:
    path = Path(path)
    manifest = dataio.read_manifest(path / "manifest.json")
    ds = PerturbationDataset(
        kind=manifest["kind"],
        d=int(manifest["d"]),
        n=int(manifest["n"]),
        paired=bool(manifest["paired"]),
        base_seed=int(manifest["base_seed"]),
    )
    for entry in manifest["conditions"]:
        values, kind, code = dataio.read_batch_file(path / entry["file"])
        if entry["kind"] == "obs":
            ds.observational[entry["context"]] = values
        else:
            key = (entry["context"], entry["treatment"])
            ds.interventional[key] = values
            ds.treatment_codes[key] = code
    return ds


# -- training bundles -----------------------------------------------------------


class BundleSampler:
    """Streams training bundles drawn from a dataset's train conditions.

    Each draw picks a query condition, then ``k_context`` distinct other
    train treatments of the same context as the interventional context set,
    assigns them random distinct slots (so every slot embedding trains
    regardless of k), and subsamples rows to keep attention cheap.
    """

    def __init__(
        self,
        dataset: PerturbationDataset,
        train_conditions: Sequence[ConditionKey],
        k_context: int,
        max_context: int,
        seed: int,
        n_obs_tokens: int = 32,
        m_tokens: int = 32,
    ):
        if not train_conditions:
            raise InvalidArgumentError("no train conditions to sample from")
        self.dataset = dataset
        self.rng = np.random.default_rng(seed)
        self.k_context = k_context
        self.max_context = max_context
        self.n_obs_tokens = n_obs_tokens
        self.m_tokens = m_tokens
        self.queries = sorted((c.context_id, c.treatment_id) for c in train_conditions)
        by_context: dict[int, list[int]] = {}
        for ctx, t in self.queries:
            by_context.setdefault(ctx, []).append(t)
        self.by_context = by_context

    def __iter__(self) -> Iterator[ExperimentBundle]:
        return self

    def _rows(self, batch: np.ndarray, count: int) -> np.ndarray:
        n = batch.shape[0]
        if count >= n:
            return batch
        idx = self.rng.choice(n, size=count, replace=False)
        return batch[idx]

    def __next__(self) -> ExperimentBundle:
        ctx, query_t = self.queries[int(self.rng.integers(len(self.queries)))]
        others = [t for t in self.by_context[ctx] if t != query_t]
        k = min(self.k_context, len(others), self.max_context)
        chosen = sorted(self.rng.choice(len(others), size=k, replace=False)) if k else []
        context_treatments = [others[i] for i in chosen]
        slots = tuple(int(s) for s in self.rng.choice(self.max_context, size=k, replace=False)) if k else ()

        context = tuple(
            (
                self.dataset.treatment_codes[(ctx, t)],
                self._rows(self.dataset.interventional[(ctx, t)], self.m_tokens),
            )
            for t in context_treatments
        )
        return ExperimentBundle(
            y_obs=self._rows(self.dataset.observational[ctx], self.n_obs_tokens),
            context=context,
            query_code=self.dataset.treatment_codes[(ctx, query_t)],
            target=self._rows(self.dataset.interventional[(ctx, query_t)], self.m_tokens),
            context_slots=slots,
        )


def build_eval_bundle(
    dataset: PerturbationDataset,
    condition: ConditionKey,
    context_treatments: Sequence[int],
    max_rows: Optional[int] = None,
) -> ExperimentBundle:
    """Inference bundle for one test condition with an explicit context set."""
    ctx = condition.context_id
    context = tuple(
        (dataset.treatment_codes[(ctx, t)], _head(dataset.interventional[(ctx, t)], max_rows))
        for t in context_treatments
    )
    return ExperimentBundle(
        y_obs=_head(dataset.observational[ctx], max_rows),
        context=context,
        query_code=dataset.treatment_codes[(ctx, condition.treatment_id)],
        target=None,
        context_slots=tuple(range(len(context_treatments))),
    )


def _head(batch: np.ndarray, max_rows: Optional[int]) -> np.ndarray:
    return batch if max_rows is None or batch.shape[0] <= max_rows else batch[:max_rows]
