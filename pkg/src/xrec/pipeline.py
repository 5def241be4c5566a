"""Adapter-only training, prompt assembly under ablation flags, and generation."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import numerics as nx
from .adapter import AdapterConfig, MoeAdapter, make_fixed_inputs
from .checkpoint import read_checkpoint, write_checkpoint
from .datagen import ExplanationSample, Profiles
from .graph import EmbeddingTable
from .lm import ITEM_EMBED, USER_EMBED, ToyLm, generate_ids, detokenize, nll_on_target, tokenize

log = logging.getLogger(__name__)

INSTRUCTION = "explain why the user would enjoy the item:"


@dataclass
class TrainConfig:
    epochs: int = 1
    batch_size: int = 1
    learning_rate: float = 1e-4
    weight_decay: float = 1e-6
    seed: int = 0
    early_stopping: bool = False

    def __post_init__(self):
        if self.batch_size != 1:
            raise ValueError("batch_size is fixed at 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass(frozen=True)
class AblationFlags:
    use_profiles: bool = True
    use_injection: bool = True
    use_embeddings: bool = True
    fixed_moe_inputs: bool = False

    VARIANTS = {}  # filled below

    @classmethod
    def from_name(cls, name: str) -> "AblationFlags":
        try:
            return VARIANTS[name]
        except KeyError:
            raise ValueError(f"unknown ablation {name!r}; choose from {', '.join(VARIANTS)}") from None

    @property
    def injects(self) -> bool:
        return self.use_embeddings

    @property
    def inject_layers(self) -> str:
        return "all" if self.use_injection else "first"


VARIANTS = {
    "full": AblationFlags(),
    "wo-profiles": AblationFlags(use_profiles=False),
    "wo-injection": AblationFlags(use_injection=False),
    "wo-profiles-injection": AblationFlags(use_profiles=False, use_injection=False),
    "wo-embeddings": AblationFlags(use_embeddings=False, use_injection=False),
    "fixed-moe": AblationFlags(fixed_moe_inputs=True),
}


@dataclass
class PromptSpec:
    template: str
    user_profile: str | None = None
    item_profile: str | None = None
    target: str | None = None

    def ids(self, vocab) -> list[int]:
        return [vocab.bos] + tokenize(self.template, vocab)

    def slot_positions(self, vocab) -> dict[str, int]:
        ids = self.ids(vocab)
        out = {}
        for role, slot in (("user", vocab.user_slot), ("item", vocab.item_slot)):
            if slot in ids:
                out[role] = ids.index(slot)
        return out


class MissingProfileError(KeyError):
    pass


def assemble_prompt(sample: ExplanationSample, profiles: Profiles, flags: AblationFlags,
                    with_target: bool = False) -> PromptSpec:
    if sample.uid not in profiles.users:
        raise MissingProfileError(f"no profile for user {sample.uid}")
    if sample.iid not in profiles.items:
        raise MissingProfileError(f"no profile for item {sample.iid}")
    parts = []
    user_text = item_text = None
    if flags.use_embeddings:
        parts.append(f"{USER_EMBED} {ITEM_EMBED}")
    if flags.use_profiles:
        user_text = profiles.users[sample.uid]
        item = profiles.items[sample.iid]
        item_text = f"{item.title}, {item.description}"
        parts.append(f"user profile: {user_text}")
        parts.append(f"item profile: {item_text}")
    parts.append(INSTRUCTION)
    return PromptSpec(" ".join(parts), user_text, item_text, sample.explanation if with_target else None)


# ---------------------------------------------------------------------------
# early stopping
# ---------------------------------------------------------------------------

@dataclass
class EarlyStopState:
    """Rolling-window ATL tracker, inert for the first N/5 samples."""

    dataset_size: int
    window_size: int = 10
    window: list[float] = field(default_factory=list)
    best_atl: float = math.inf
    samples_since_best: int = 0
    processed: int = 0

    @property
    def enabled_after(self) -> float:
        return self.dataset_size / 5

    @property
    def patience(self) -> int:
        return max(1, math.ceil(self.dataset_size / 10))

    @property
    def atl(self) -> float:
        return float(np.mean(self.window)) if self.window else math.nan


def early_stop_update(state: EarlyStopState, sample_loss: float) -> bool:
    """Push one loss; return True to continue, False to stop."""
    state.window.append(float(sample_loss))
    if len(state.window) > state.window_size:
        state.window.pop(0)
    state.processed += 1
    if state.processed <= state.enabled_after:
        return True
    atl = state.atl
    if atl < state.best_atl:
        state.best_atl = atl
        state.samples_since_best = 0
    else:
        state.samples_since_best += 1
    return state.samples_since_best < state.patience


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def make_adapters(in_dim: int, out_dim: int, seed: int = 0, **kw) -> dict[str, MoeAdapter]:
    return {
        "user": MoeAdapter(AdapterConfig(in_dim=in_dim, out_dim=out_dim, seed=seed, **kw)),
        "item": MoeAdapter(AdapterConfig(in_dim=in_dim, out_dim=out_dim, seed=seed + 1, **kw)),
    }


def _inputs_for(sample, embeddings: EmbeddingTable | None, fixed):
    if fixed is not None:
        return fixed
    if embeddings is None:
        raise ValueError("no embedding table supplied")
    try:
        return embeddings.user(sample.uid), embeddings.item(sample.iid)
    except KeyError as exc:
        raise KeyError(f"embedding table is missing an id: {exc.args[0]}") from None


def _injections(spec: PromptSpec, lm: ToyLm, adapters, xu, xi, rng) -> dict[int, nx.Tensor]:
    pos = spec.slot_positions(lm.vocab)
    return {pos["user"]: adapters["user"](xu, rng), pos["item"]: adapters["item"](xi, rng)}


@dataclass
class TrainResult:
    adapters: dict[str, MoeAdapter]
    trace: list[tuple[int, float, float]]
    stopped_early: bool = False

    @property
    def losses(self) -> np.ndarray:
        return np.array([t[1] for t in self.trace])


def train_adapter(lm: ToyLm, adapters: dict[str, MoeAdapter], embeddings: EmbeddingTable | None, samples,
                  profiles: Profiles, config: TrainConfig, flags: AblationFlags,
                  fixed_inputs=None) -> TrainResult:
    """One pass of per-sample NLL descent on the adapters only.

    The LM must be frozen; its digest is checked again on exit.  With
    ``use_embeddings`` off the adapters are out of the data path, so only the
    loss trace is recorded.
    """
    if not lm.frozen:
        raise ValueError("train_adapter requires a frozen LM")
    digest = lm.frozen_digest
    samples = list(samples)
    rng = np.random.default_rng(config.seed)
    if flags.fixed_moe_inputs and fixed_inputs is None:
        fixed_inputs = make_fixed_inputs(adapters["user"].config.in_dim, config.seed)
    params = [p for ad in adapters.values() for p in ad.parameters()]
    opt = nx.DecoupledSGD(params, lr=config.learning_rate, weight_decay=config.weight_decay)
    for ad in adapters.values():
        ad.train()
    state = EarlyStopState(len(samples) * config.epochs)
    trace: list[tuple[int, float, float]] = []
    stopped = False
    step = 0
    vocab = lm.vocab
    for _epoch in range(config.epochs):
        for j in rng.permutation(len(samples)):
            s = samples[j]
            spec = assemble_prompt(s, profiles, flags)
            prompt = spec.ids(vocab)
            target = tokenize(s.explanation, vocab) + [vocab.eos]
            with nx.Tape() as tape:
                inj = None
                if flags.use_embeddings:
                    xu, xi = _inputs_for(s, embeddings, fixed_inputs if flags.fixed_moe_inputs else None)
                    inj = _injections(spec, lm, adapters, xu, xi, rng)
                loss = nll_on_target(lm, prompt, inj, target, layers=flags.inject_layers)
            if flags.use_embeddings:
                opt.zero_grad()
                nx.backward(loss, tape)
                opt.step()
            value = loss.item()
            keep_going = early_stop_update(state, value)
            trace.append((step, value, state.atl))
            step += 1
            if config.early_stopping and not keep_going:
                stopped = True
                break
        if stopped:
            break
    for ad in adapters.values():
        ad.eval()
    if lm.digest() != digest:
        raise RuntimeError("frozen LM parameters changed during adapter training")
    return TrainResult(adapters, trace, stopped)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

@dataclass
class Generation:
    sample: ExplanationSample
    text: str | None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def adapted_vectors(lm, adapters, embeddings, sample, flags: AblationFlags, fixed_inputs=None):
    """Inference-mode (user, item) adapted vectors for one sample."""
    xu, xi = _inputs_for(sample, embeddings, fixed_inputs if flags.fixed_moe_inputs else None)
    with nx.no_tape():
        return adapters["user"].eval()(xu).data.copy(), adapters["item"].eval()(xi).data.copy()


def explain_one(lm, adapters, embeddings, sample, profiles, flags, *, mode="greedy", seed=0, max_new=40,
                fixed_inputs=None) -> str:
    spec = assemble_prompt(sample, profiles, flags)
    prompt = spec.ids(lm.vocab)
    inj = None
    if flags.use_embeddings:
        vu, vi = adapted_vectors(lm, adapters, embeddings, sample, flags, fixed_inputs)
        pos = spec.slot_positions(lm.vocab)
        inj = {pos["user"]: vu, pos["item"]: vi}
    ids = generate_ids(lm, prompt, inj, mode=mode, max_new=max_new, seed=seed, layers=flags.inject_layers)
    return detokenize(ids, lm.vocab)


def generate_explanations(lm, adapters, embeddings, samples, profiles, flags: AblationFlags, *,
                          mode: str = "greedy", seed: int = 0, max_new: int = 40, fixed_inputs=None,
                          workers: int = 1) -> list[Generation]:
    """Decode one explanation per sample, in input order; failures are recorded, not raised."""
    samples = list(samples)
    if flags.fixed_moe_inputs and fixed_inputs is None and adapters:
        fixed_inputs = make_fixed_inputs(adapters["user"].config.in_dim, seed)
    for ad in (adapters or {}).values():
        ad.eval()

    def run(args):
        k, s = args
        try:
            text = explain_one(lm, adapters, embeddings, s, profiles, flags, mode=mode,
                               seed=int(np.random.SeedSequence([seed, k]).generate_state(1)[0]),
                               max_new=max_new, fixed_inputs=fixed_inputs)
            return Generation(s, text)
        except (KeyError, ValueError) as exc:
            return Generation(s, None, f"{type(exc).__name__}: {exc}")

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run, enumerate(samples)))
    return [run(a) for a in enumerate(samples)]


def subsample(samples, fraction: float, seed: int):
    """ceil(fraction * N) samples chosen by a seeded shuffle, kept in input order."""
    samples = list(samples)
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    n = math.ceil(fraction * len(samples))
    idx = np.sort(np.random.default_rng(seed).permutation(len(samples))[:n])
    return [samples[i] for i in idx]


def save_embeddings(path, table: EmbeddingTable) -> None:
    write_checkpoint(path, "gnn-embeddings", dict(table.meta),
                     {"user_vectors": table.user_vectors, "item_vectors": table.item_vectors})


def load_embeddings(path) -> EmbeddingTable:
    _, cfg, arrays, _ = read_checkpoint(path, expect_kind="gnn-embeddings")
    return EmbeddingTable(arrays["user_vectors"], arrays["item_vectors"], meta=cfg)


def lm_corpus(samples, profiles: Profiles) -> list[str]:
    """Pretraining text: each training prompt (with slots) followed by its explanation."""
    full = VARIANTS["full"]
    return [f"{assemble_prompt(s, profiles, full).template} {s.explanation}" for s in samples]


def pretrain_explainer_lm(samples, profiles: Profiles, embeddings: EmbeddingTable | None = None,
                          config=None, warm_up: bool = True) -> ToyLm:
    """Pretrain the frozen LM on training prompts plus explanations.

    With ``warm_up`` and an embedding table, each line's GNN vectors fill the
    slots during pretraining (see ``pretrain_lm``).
    """
    from .lm import pretrain_lm

    samples = list(samples)
    slot_inputs = None
    if warm_up and embeddings is not None:
        slot_inputs = np.stack([np.stack([embeddings.user(s.uid), embeddings.item(s.iid)]) for s in samples])
    extra = [*profiles.users.values(), *(f"{p.title}, {p.description}" for p in profiles.items.values())]
    return pretrain_lm(lm_corpus(samples, profiles), config, slot_inputs=slot_inputs, extra_text=extra)


class XRecExplainer(BaseEstimator):
    """fit/predict facade over adapter training and generation for one ablation variant."""

    def __init__(self, lm=None, embeddings=None, profiles=None, variant="full", learning_rate=1e-4,
                 weight_decay=1e-6, num_experts=8, dropout_rate=0.2, noise_factor=0.01,
                 early_stopping=False, decode_mode="greedy", max_new=40, seed=0):
        self.lm = lm
        self.embeddings = embeddings
        self.profiles = profiles
        self.variant = variant
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.num_experts = num_experts
        self.dropout_rate = dropout_rate
        self.noise_factor = noise_factor
        self.early_stopping = early_stopping
        self.decode_mode = decode_mode
        self.max_new = max_new
        self.seed = seed

    def _flags(self) -> AblationFlags:
        return self.variant if isinstance(self.variant, AblationFlags) else AblationFlags.from_name(self.variant)

    def fit(self, samples, y=None):
        if self.lm is None or self.profiles is None:
            raise ValueError("XRecExplainer needs an lm and profiles")
        in_dim = self.embeddings.dim if self.embeddings is not None else 32
        self.adapters_ = make_adapters(in_dim, self.lm.config.d_lm, seed=self.seed,
                                       num_experts=self.num_experts, dropout_rate=self.dropout_rate,
                                       noise_factor=self.noise_factor)
        self.fixed_inputs_ = make_fixed_inputs(in_dim, self.seed) if self._flags().fixed_moe_inputs else None
        cfg = TrainConfig(learning_rate=self.learning_rate, weight_decay=self.weight_decay, seed=self.seed,
                          early_stopping=self.early_stopping)
        result = train_adapter(self.lm, self.adapters_, self.embeddings, samples, self.profiles, cfg,
                               self._flags(), fixed_inputs=self.fixed_inputs_)
        self.loss_trace_ = result.trace
        self.stopped_early_ = result.stopped_early
        return self

    def predict(self, samples) -> list[str | None]:
        check_is_fitted(self, "adapters_")
        gens = generate_explanations(self.lm, self.adapters_, self.embeddings, samples, self.profiles,
                                     self._flags(), mode=self.decode_mode, seed=self.seed,
                                     max_new=self.max_new, fixed_inputs=self.fixed_inputs_)
        return [g.text for g in gens]
