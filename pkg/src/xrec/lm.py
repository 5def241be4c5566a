"""A small frozen decoder-only transformer with reserved injection slots.

Positions holding ``<user_embed>`` / ``<item_embed>`` are *slots*: at the input
of every decoder block their hidden state is overwritten by an injection
vector.  A plain forward pins each slot to the LM's own embedding of the
reserved token, so passing those embeddings as injections reproduces it exactly.
"""
from __future__ import annotations

import hashlib
import logging
import re
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .checkpoint import read_checkpoint, write_checkpoint

log = logging.getLogger(__name__)

BOS, EOS, UNK = "<bos>", "<eos>", "<unk>"
USER_EMBED, ITEM_EMBED = "<user_embed>", "<item_embed>"
RESERVED = (BOS, EOS, UNK, USER_EMBED, ITEM_EMBED)

_TOKEN_RE = re.compile(r"<[a-z_]+>|[a-z0-9]+(?:'[a-z]+)?|[^\sa-z0-9]")
_NO_SPACE_BEFORE = set(",.!?;:)'")
_NEG = -1e9


def split_words(text: str) -> list[str]:
    """Lowercased word / punctuation split."""
    return _TOKEN_RE.findall(text.lower())


class Vocab:
    def __init__(self, tokens):
        self.itos: list[str] = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    @classmethod
    def build(cls, corpus) -> "Vocab":
        seen = set()
        for text in corpus:
            seen.update(split_words(text))
        return cls(sorted(seen - set(RESERVED)))

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    bos = property(lambda self: self.stoi[BOS])
    eos = property(lambda self: self.stoi[EOS])
    unk = property(lambda self: self.stoi[UNK])
    user_slot = property(lambda self: self.stoi[USER_EMBED])
    item_slot = property(lambda self: self.stoi[ITEM_EMBED])

    @property
    def slot_ids(self) -> tuple[int, int]:
        return self.user_slot, self.item_slot


def tokenize(text: str, vocab: Vocab) -> list[int]:
    unk = vocab.unk
    return [vocab.stoi.get(tok, unk) for tok in split_words(text)]


def detokenize(ids, vocab: Vocab) -> str:
    words = []
    for i in ids:
        tok = vocab.itos[int(i)]
        if tok in (BOS, EOS):
            continue
        if words and (tok in _NO_SPACE_BEFORE or tok.startswith("'")):
            words[-1] += tok
        else:
            words.append(tok)
    return " ".join(words)


@dataclass
class ToyLmConfig:
    d_lm: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 128
    vocab_size: int = 0
    seed: int = 0
    # pretraining schedule
    max_epochs: int = 12
    learning_rate: float = 3e-3
    batch_size: int = 32
    tol: float = 1e-3
    injection_mode: str = "replace"

    def __post_init__(self):
        if self.d_lm % self.n_heads:
            raise ValueError("d_lm must be divisible by n_heads")
        if self.injection_mode not in ("replace", "add"):
            raise ValueError("injection_mode must be 'replace' or 'add'")


def _init_params(cfg: ToyLmConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d, dh, V = cfg.d_lm, cfg.d_lm // cfg.n_heads, cfg.vocab_size
    p = {
        "tok_emb": rng.normal(0, 0.1, (V, d)),
        "pos_emb": rng.normal(0, 0.1, (cfg.max_seq_len, d)),
        "out_bias": np.zeros(V),
        "lnf_g": np.ones(d),
        "lnf_b": np.zeros(d),
    }
    for l in range(cfg.n_layers):
        pre = f"l{l}."
        p[pre + "ln1_g"], p[pre + "ln1_b"] = np.ones(d), np.zeros(d)
        p[pre + "ln2_g"], p[pre + "ln2_b"] = np.ones(d), np.zeros(d)
        for h in range(cfg.n_heads):
            for w in ("wq", "wk", "wv"):
                p[f"{pre}{w}{h}"] = rng.normal(0, d ** -0.5, (d, dh))
            p[f"{pre}wo{h}"] = rng.normal(0, (dh * cfg.n_heads * 2 * cfg.n_layers) ** -0.5, (dh, d))
        p[pre + "bo"] = np.zeros(d)
        p[pre + "w1"] = rng.normal(0, d ** -0.5, (d, 4 * d))
        p[pre + "b1"] = np.zeros(4 * d)
        p[pre + "w2"] = rng.normal(0, (4 * d * 2 * cfg.n_layers) ** -0.5, (4 * d, d))
        p[pre + "b2"] = np.zeros(d)
    return p


class ToyLm:
    """Pre-norm transformer, learned positions, output tied to token embeddings."""

    def __init__(self, config: ToyLmConfig, vocab: Vocab, params: dict[str, np.ndarray] | None = None):
        if config.vocab_size != len(vocab):
            config.vocab_size = len(vocab)
        self.config = config
        self.vocab = vocab
        if params is None:
            params = _init_params(config, np.random.default_rng(config.seed))
        self.params = {k: nx.parameter(np.array(v, dtype=np.float64), name=k) for k, v in params.items()}
        self.frozen = False
        self.frozen_digest: str | None = None
        self._mask_cache: dict[int, nx.Tensor] = {}

    # -- freeze contract -----------------------------------------------------
    def freeze(self) -> "ToyLm":
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None
            t.data.setflags(write=False)
        self.frozen = True
        self.frozen_digest = self.digest()
        return self

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    # -- forward -------------------------------------------------------------
    def _causal_mask(self, T: int) -> nx.Tensor:
        m = self._mask_cache.get(T)
        if m is None:
            m = self._mask_cache[T] = nx.constant(np.triu(np.full((T, T), _NEG), k=1))
        return m

    def _block(self, x: nx.Tensor, l: int) -> nx.Tensor:
        P, cfg = self.params, self.config
        pre = f"l{l}."
        T = x.shape[-2]
        scale = 1.0 / np.sqrt(cfg.d_lm // cfg.n_heads)
        h = nx.layer_norm(x, P[pre + "ln1_g"], P[pre + "ln1_b"])
        attn = None
        for hd in range(cfg.n_heads):
            q = nx.matmul(h, P[f"{pre}wq{hd}"])
            k = nx.matmul(h, P[f"{pre}wk{hd}"])
            v = nx.matmul(h, P[f"{pre}wv{hd}"])
            scores = nx.add(nx.scale(nx.matmul(q, k, transpose_b=True), scale), self._causal_mask(T))
            o = nx.matmul(nx.matmul(nx.softmax(scores), v), P[f"{pre}wo{hd}"])
            attn = o if attn is None else nx.add(attn, o)
        x = nx.add(x, nx.add(attn, P[pre + "bo"]))
        h = nx.layer_norm(x, P[pre + "ln2_g"], P[pre + "ln2_b"])
        h = nx.gelu(nx.add(nx.matmul(h, P[pre + "w1"]), P[pre + "b1"]))
        h = nx.add(nx.matmul(h, P[pre + "w2"]), P[pre + "b2"])
        return nx.add(x, h)

    def _embed(self, ids: np.ndarray) -> nx.Tensor:
        T = ids.shape[-1]
        if T > self.config.max_seq_len:
            raise ValueError(f"sequence of length {T} exceeds max_seq_len={self.config.max_seq_len}")
        return nx.add(nx.embedding(self.params["tok_emb"], ids),
                      nx.embedding(self.params["pos_emb"], np.arange(T)))

    def _batch_hidden(self, ids: np.ndarray, slot_fill: nx.Tensor | None = None) -> nx.Tensor:
        """Batched forward (B, T).

        Slot positions are overwritten before every block, either with the
        reserved tokens' own embeddings or with ``slot_fill`` (B, T, d), which
        must be zero away from slot positions.
        """
        x = self._embed(ids)
        slots = np.isin(ids, self.vocab.slot_ids)
        pin = keep = None
        if slots.any():
            d = self.config.d_lm
            keep = nx.constant(np.repeat((~slots)[..., None], d, axis=-1).astype(np.float64))
            if slot_fill is not None:
                pin = slot_fill
            else:
                sel = nx.constant(np.repeat(slots[..., None], d, axis=-1).astype(np.float64))
                pin = nx.multiply(nx.embedding(self.params["tok_emb"], ids), sel)
        for l in range(self.config.n_layers):
            if pin is not None:
                x = nx.add(nx.multiply(x, keep), pin)
            x = self._block(x, l)
        return nx.layer_norm(x, self.params["lnf_g"], self.params["lnf_b"])

    def _place(self, x: nx.Tensor, injections: dict[int, nx.Tensor], mode: str) -> nx.Tensor:
        T, d = x.shape
        positions = sorted(injections)
        if mode == "add":
            pieces, prev = [], 0
            for p in positions:
                if p > prev:
                    pieces.append(nx.constant(np.zeros((p - prev, d))))
                pieces.append(injections[p])
                prev = p + 1
            if prev < T:
                pieces.append(nx.constant(np.zeros((T - prev, d))))
            return nx.add(x, nx.concat_rows(pieces))
        pieces, prev = [], 0
        for p in positions:
            if p > prev:
                pieces.append(nx.slice_rows(x, prev, p))
            pieces.append(injections[p])
            prev = p + 1
        if prev < T:
            pieces.append(nx.slice_rows(x, prev, T))
        return nx.concat_rows(pieces)

    def hidden_states(self, ids, injections: dict | None = None, *, layers: str = "all",
                      mode: str | None = None) -> nx.Tensor:
        """Final-layer (post-norm) hidden states of one sequence, shape (T, d)."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise ValueError("hidden_states expects a non-empty 1-D id sequence")
        mode = mode or self.config.injection_mode
        slot_pos = [int(p) for p in np.flatnonzero(np.isin(ids, self.vocab.slot_ids))]
        inj = {}
        if injections is not None:
            for p, v in injections.items():
                p = int(p)
                if not (0 <= p < len(ids)) or p not in slot_pos:
                    raise ValueError(f"injection position {p} does not hold a reserved slot token")
                v = v if isinstance(v, nx.Tensor) else nx.constant(v)
                if v.shape not in ((self.config.d_lm,), (1, self.config.d_lm)):
                    raise nx.ShapeError(f"injection at {p} has shape {v.shape}, expected ({self.config.d_lm},)")
                inj[p] = v
            missing = [p for p in slot_pos if p not in inj]
            if missing:
                raise ValueError(f"reserved slot token at position(s) {missing} lacks an injection")
        x = self._embed(ids)
        if injections is None:
            # plain forward: slots pinned to the reserved tokens' own embeddings
            inj = {p: nx.embedding(self.params["tok_emb"], ids[p:p + 1]) for p in slot_pos}
            mode, layers = "replace", "all"
        for l in range(self.config.n_layers):
            if inj and (layers == "all" or l == 0):
                x = self._place(x, inj, mode)
            x = self._block(x, l)
        return nx.layer_norm(x, self.params["lnf_g"], self.params["lnf_b"])

    def logits_from_hidden(self, h: nx.Tensor) -> nx.Tensor:
        return nx.add(nx.matmul(h, self.params["tok_emb"], transpose_b=True), self.params["out_bias"])

    def forward(self, ids, injections: dict | None = None, *, layers: str = "all", mode: str | None = None) -> nx.Tensor:
        return self.logits_from_hidden(self.hidden_states(ids, injections, layers=layers, mode=mode))

    def token_states(self, text: str) -> np.ndarray:
        """Contextual vectors for each token of ``text`` (BOS-prefixed, BOS row dropped)."""
        ids = tokenize(text, self.vocab)
        if not ids:
            return np.zeros((0, self.config.d_lm))
        ids = [self.vocab.bos] + ids[: self.config.max_seq_len - 1]
        with nx.no_tape():
            return self.hidden_states(ids).data[1:].copy()


def forward_injected(lm: ToyLm, ids, injections: dict, *, layers: str = "all", mode: str | None = None) -> nx.Tensor:
    """Logits per position with slot hidden states overwritten at each block input."""
    return lm.forward(ids, injections, layers=layers, mode=mode)


def nll_on_target(lm: ToyLm, prompt_ids, injections, target_ids, *, layers: str = "all",
                  mode: str | None = None) -> nx.Tensor:
    """Mean -log p(target_t | prompt, target_<t); prompt positions excluded."""
    prompt_ids, target_ids = list(prompt_ids), list(target_ids)
    if not prompt_ids or not target_ids:
        raise ValueError("prompt and target must both be non-empty")
    n = len(prompt_ids) + len(target_ids)
    if n > lm.config.max_seq_len:
        raise ValueError(f"sequence too long: {n} > max_seq_len={lm.config.max_seq_len}")
    ids = prompt_ids + target_ids
    logits = lm.forward(ids, injections if injections else None, layers=layers, mode=mode)
    pred = nx.slice_rows(logits, len(prompt_ids) - 1, n - 1)
    return nx.cross_entropy(pred, np.asarray(target_ids))


def generate_ids(lm: ToyLm, prompt_ids, injections=None, *, mode: str = "greedy", max_new: int = 40,
                 seed: int = 0, temperature: float = 1.0, layers: str = "all") -> list[int]:
    ids = list(prompt_ids)
    if len(ids) > lm.config.max_seq_len:
        raise ValueError("prompt does not fit in the context window")
    rng = np.random.default_rng(seed)
    inj = None
    if injections:
        inj = {p: (v.data if isinstance(v, nx.Tensor) else np.asarray(v)) for p, v in injections.items()}
    out: list[int] = []
    # reserved tokens other than EOS are never emitted
    banned = [lm.vocab.bos, lm.vocab.unk, *lm.vocab.slot_ids]
    with nx.no_tape():
        for _ in range(max_new):
            if len(ids) >= lm.config.max_seq_len:
                break
            logits = lm.forward(ids, inj, layers=layers).data[-1].copy()
            logits[banned] = -np.inf
            if mode == "greedy":
                nxt = int(np.argmax(logits))
            elif mode == "temperature":
                z = logits / max(temperature, 1e-8)
                p = np.exp(z - z.max())
                p /= p.sum()
                nxt = int(rng.choice(len(p), p=p))
            else:
                raise ValueError(f"unknown decode mode {mode!r}")
            if nxt == lm.vocab.eos:
                break
            ids.append(nxt)
            out.append(nxt)
    return out


def generate(lm: ToyLm, prompt_ids, injections=None, mode: str = "greedy", max_new: int = 40, seed: int = 0,
             **kw) -> str:
    return detokenize(generate_ids(lm, prompt_ids, injections, mode=mode, max_new=max_new, seed=seed, **kw), lm.vocab)


def encode_corpus(corpus, vocab: Vocab, max_len: int) -> list[list[int]]:
    seqs = []
    for text in corpus:
        ids = [vocab.bos] + tokenize(text, vocab) + [vocab.eos]
        seqs.append(ids[:max_len])
    return seqs


def _slot_fill(ids: np.ndarray, vocab: Vocab, rows: nx.Tensor) -> nx.Tensor:
    """Scatter per-sequence user/item rows (2B, d) onto slot positions of ids (B, T)."""
    B = ids.shape[0]
    index = np.zeros(ids.shape, dtype=np.int64)
    r = np.arange(B)[:, None]
    index = np.where(ids == vocab.user_slot, r + 1, index)
    index = np.where(ids == vocab.item_slot, r + 1 + B, index)
    table = nx.concat_rows([nx.constant(np.zeros((1, rows.shape[1]))), rows])
    return nx.embedding(table, index)


def pretrain_lm(corpus, config: ToyLmConfig | None = None, slot_inputs=None, extra_text=()) -> ToyLm:
    """Next-token pretraining on ``corpus`` (Adam, padded mini-batches), then freeze.

    ``slot_inputs`` (N, 2, d_g), aligned with ``corpus``, switches on slot
    warm-up: a throwaway affine map of each line's user and item vectors fills
    the slot positions at every block, so the network learns to read them. The
    map is discarded afterwards. ``extra_text`` only contributes vocabulary.
    """
    corpus = list(corpus)
    if not corpus:
        raise ValueError("cannot pretrain on an empty corpus")
    config = config or ToyLmConfig()
    vocab = Vocab.build([*corpus, *extra_text])
    config.vocab_size = len(vocab)
    lm = ToyLm(config, vocab)
    seqs = encode_corpus(corpus, vocab, config.max_seq_len)
    rng = np.random.default_rng([config.seed, 1])
    params = list(lm.params.values())
    warm = None
    if slot_inputs is not None:
        slot_inputs = np.asarray(slot_inputs, dtype=np.float64)
        if slot_inputs.ndim != 3 or slot_inputs.shape[:2] != (len(corpus), 2):
            raise nx.ShapeError("slot_inputs must have shape (len(corpus), 2, d_g)")
        dg = slot_inputs.shape[2]
        scale = slot_inputs.std() or 1.0
        warm = {
            "user_w": nx.parameter(rng.normal(0, 0.1 / scale / np.sqrt(dg), (dg, config.d_lm))),
            "item_w": nx.parameter(rng.normal(0, 0.1 / scale / np.sqrt(dg), (dg, config.d_lm))),
            "user_b": nx.parameter(np.zeros(config.d_lm)),
            "item_b": nx.parameter(np.zeros(config.d_lm)),
        }
        params += list(warm.values())
    opt = nx.Adam(params, lr=config.learning_rate)
    prev = None
    for epoch in range(config.max_epochs):
        order = rng.permutation(len(seqs))
        losses, weights = [], []
        for start in range(0, len(order), config.batch_size):
            batch = [seqs[j] for j in order[start:start + config.batch_size]]
            T = max(len(s) for s in batch)
            ids = np.full((len(batch), T), vocab.eos, dtype=np.int64)
            tgt = np.full((len(batch), T - 1), -1, dtype=np.int64)
            for r, s in enumerate(batch):
                ids[r, :len(s)] = s
                tgt[r, :len(s) - 1] = s[1:]
            if (tgt >= 0).sum() == 0:
                continue
            with nx.Tape() as tape:
                fill = None
                if warm is not None:
                    sel = order[start:start + config.batch_size]
                    rows = nx.concat_rows([
                        nx.add(nx.matmul(nx.constant(slot_inputs[sel, 0]), warm["user_w"]), warm["user_b"]),
                        nx.add(nx.matmul(nx.constant(slot_inputs[sel, 1]), warm["item_w"]), warm["item_b"]),
                    ])
                    fill = _slot_fill(ids[:, :-1], vocab, rows)
                h = lm._batch_hidden(ids[:, :-1], fill)
                loss = nx.cross_entropy(lm.logits_from_hidden(h), tgt)
            opt.zero_grad()
            nx.backward(loss, tape)
            opt.step()
            losses.append(loss.item())
            weights.append(int((tgt >= 0).sum()))
        cur = float(np.average(losses, weights=weights))
        log.info("lm epoch %d loss %.4f", epoch + 1, cur)
        if prev is not None and prev - cur < config.tol:
            break
        prev = cur
    lm.pretrain_epochs = epoch + 1
    lm.pretrain_loss = cur
    return lm.freeze()


def save_lm(path, lm: ToyLm) -> None:
    write_checkpoint(path, "toy-lm", asdict(lm.config), lm.state_dict(),
                     {"vocab": lm.vocab.itos, "frozen": lm.frozen, "digest": lm.frozen_digest})


def load_lm(path) -> ToyLm:
    _, cfg, arrays, extra = read_checkpoint(path, expect_kind="toy-lm")
    vocab = Vocab(extra["vocab"][len(RESERVED):])
    if vocab.itos != extra["vocab"]:
        raise ValueError("vocabulary in checkpoint has unexpected reserved ids")
    lm = ToyLm(ToyLmConfig(**cfg), vocab, arrays)
    if extra.get("frozen"):
        lm.freeze()
        if extra.get("digest") and lm.frozen_digest != extra["digest"]:
            raise ValueError("LM checkpoint digest mismatch")
    return lm
