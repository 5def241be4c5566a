"""Synthetic explainable-recommendation world and its JSON Lines files.

Users and items get latent topic mixtures; interactions are drawn in
proportion to mixture affinity; profiles and ground-truth explanations are
rendered from fixed templates using topic words.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import InteractionGraph

DEFAULT_TOPICS: dict[str, list[str]] = {
    "mystery": ["detective", "clue", "suspense", "secret", "alibi", "riddle", "puzzle", "crime",
                "witness", "motive", "shadow", "case"],
    "romance": ["love", "passion", "heart", "wedding", "longing", "courtship", "kiss", "devotion",
                "flirtation", "tenderness", "affection", "date"],
    "fantasy": ["magic", "dragon", "quest", "wizard", "sword", "kingdom", "spell", "prophecy",
                "elf", "castle", "rune", "curse"],
    "scifi": ["robot", "starship", "planet", "android", "galaxy", "laser", "alien", "orbit",
              "colony", "cyborg", "warp", "reactor"],
    "history": ["empire", "war", "dynasty", "revolution", "monarch", "battle", "treaty", "century",
                "archive", "pharaoh", "legion", "crusade"],
    "cooking": ["recipe", "spice", "flavor", "kitchen", "baking", "sauce", "herb", "dessert",
                "grill", "broth", "pastry", "seasoning"],
    "travel": ["journey", "island", "mountain", "voyage", "harbor", "desert", "village", "passport",
               "trail", "coast", "canyon", "border"],
    "humor": ["joke", "satire", "prank", "wit", "parody", "banter", "comedy", "gag",
              "farce", "irony", "quip", "pun"],
}

_SYLLABLES = ["ka", "lo", "mi", "ver", "dan", "rus", "tel", "bo", "shi", "nar", "qua", "zen",
              "fi", "gor", "pel", "tam"]
SPLITS = ("train", "valid", "test")
THEME_WORDS = 3  # leading words of each topic pool used in explanations


class DatasetError(ValueError):
    pass


@dataclass
class WorldConfig:
    num_users: int = 200
    num_items: int = 200
    num_topics: int = 8
    interactions_per_user: int = 15
    topic_vocab: dict[str, list[str]] | None = None
    seed: int = 0
    train_frac: float = 0.8
    valid_frac: float = 0.1
    test_frac: float = 0.1
    concentration: float = 0.05
    profile_signal: float = 0.5

    def __post_init__(self):
        if abs(self.train_frac + self.valid_frac + self.test_frac - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")
        vocab = self.topics()
        if len(vocab) < self.num_topics:
            raise ValueError(f"need {self.num_topics} topics, only {len(vocab)} word lists given")
        for name, words in vocab.items():
            if len(words) < 3:
                raise ValueError(f"topic {name!r} needs at least 3 words")
        if self.num_users < 1 or self.num_items < 1 or self.num_topics < 1:
            raise ValueError("num_users, num_items and num_topics must be positive")

    def topics(self) -> dict[str, list[str]]:
        vocab = self.topic_vocab if self.topic_vocab is not None else DEFAULT_TOPICS
        return {k: list(v) for k, v in list(vocab.items())[: self.num_topics]}


@dataclass
class ItemProfile:
    title: str
    description: str


@dataclass
class Profiles:
    users: dict[int, str] = field(default_factory=dict)
    items: dict[int, ItemProfile] = field(default_factory=dict)


@dataclass(frozen=True)
class ExplanationSample:
    uid: int
    iid: int
    explanation: str
    split: str


@dataclass
class World:
    graph: InteractionGraph
    profiles: Profiles
    samples: list[ExplanationSample]
    user_topics: np.ndarray
    item_topics: np.ndarray
    topic_names: list[str]

    def __iter__(self):
        return iter((self.graph, self.profiles, self.samples))

    def split(self, name: str) -> list[ExplanationSample]:
        return [s for s in self.samples if s.split == name]


def _join(words: list[str]) -> str:
    return ", ".join(words[:-1]) + " and " + words[-1] if len(words) > 1 else words[0]


def _item_titles(n: int, rng: np.random.Generator) -> list[str]:
    seen, titles = set(), []
    while len(titles) < n:
        k = int(rng.integers(2, 4))
        name = "".join(_SYLLABLES[int(j)] for j in rng.integers(len(_SYLLABLES), size=k))
        if name not in seen:
            seen.add(name)
            titles.append(name.capitalize())
    return titles


def generate_world(config: WorldConfig) -> World:
    if config.interactions_per_user > config.num_items:
        raise ValueError("interactions_per_user exceeds num_items: cannot draw that many distinct items")
    rng = np.random.default_rng(config.seed)
    topics = config.topics()
    names = list(topics)
    T = config.num_topics
    alpha = np.full(T, config.concentration)
    theta = rng.dirichlet(alpha, size=config.num_users) if T > 1 else np.ones((config.num_users, 1))
    phi = rng.dirichlet(alpha, size=config.num_items) if T > 1 else np.ones((config.num_items, 1))

    def body_words(t: int) -> list[str]:
        pool = topics[names[t]]
        return pool[THEME_WORDS:] if len(pool) > THEME_WORDS else pool

    # profiles -----------------------------------------------------------
    titles = _item_titles(config.num_items, rng)
    profiles = Profiles()
    for i in range(config.num_items):
        words = []
        for _ in range(3):
            t = int(rng.choice(T, p=phi[i]))
            words.append(str(rng.choice(body_words(t))))
        profiles.items[i] = ItemProfile(titles[i], f"a tale of {_join(words)}.")
    user_words: dict[int, list[str]] = {}
    taken = set()
    for u in range(config.num_users):
        for _attempt in range(1000):
            words = []
            for _ in range(3):
                t = int(rng.choice(T, p=theta[u])) if rng.random() < config.profile_signal else int(rng.integers(T))
                words.append(str(rng.choice(body_words(t))))
            if len(set(words)) == 3 and tuple(words[:2]) not in taken:
                break
        taken.add(tuple(words[:2]))
        user_words[u] = words
        profiles.users[u] = f"enjoys {_join(words)}."

    # interactions -------------------------------------------------------
    affinity = theta @ phi.T + 1e-3
    edges = []
    for u in range(config.num_users):
        p = affinity[u] / affinity[u].sum()
        items = rng.choice(config.num_items, size=config.interactions_per_user, replace=False, p=p)
        edges.extend((u, int(i)) for i in sorted(items))

    samples = []
    for u, i in edges:
        shared = int(np.argmax(theta[u] * phi[i]))
        theme = topics[names[shared]][:THEME_WORDS]
        fav = user_words[u][:2]
        text = (f"The user would enjoy {profiles.items[i].title} because it offers {_join(theme)}, "
                f"which suits their taste for {_join(fav)}.")
        samples.append((u, i, text))

    order = rng.permutation(len(samples))
    n_train = int(round(config.train_frac * len(samples)))
    n_valid = int(round(config.valid_frac * len(samples)))
    split_of = np.empty(len(samples), dtype=object)
    split_of[order[:n_train]] = "train"
    split_of[order[n_train:n_train + n_valid]] = "valid"
    split_of[order[n_train + n_valid:]] = "test"
    out = [ExplanationSample(u, i, text, str(split_of[j])) for j, (u, i, text) in enumerate(samples)]
    graph = InteractionGraph(config.num_users, config.num_items, edges)
    return World(graph, profiles, out, theta, phi, names)


def train_graph(samples, num_users: int, num_items: int, split: str = "train") -> InteractionGraph:
    """Interaction graph restricted to one split's samples."""
    return InteractionGraph(num_users, num_items, [(s.uid, s.iid) for s in samples if s.split == split])


# ---------------------------------------------------------------------------
# JSON Lines I/O
# ---------------------------------------------------------------------------

SAMPLES_FILE = "samples.jsonl"
USERS_FILE = "user_profiles.jsonl"
ITEMS_FILE = "item_profiles.jsonl"


def _dump(rec: dict) -> str:
    return json.dumps(rec, ensure_ascii=False)


def write_dataset(path, samples, profiles: Profiles) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / SAMPLES_FILE, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(_dump({"uid": s.uid, "iid": s.iid, "explanation": s.explanation, "split": s.split}) + "\n")
    with open(root / USERS_FILE, "w", encoding="utf-8", newline="\n") as fh:
        for uid in sorted(profiles.users):
            fh.write(_dump({"uid": uid, "profile": profiles.users[uid]}) + "\n")
    with open(root / ITEMS_FILE, "w", encoding="utf-8", newline="\n") as fh:
        for iid in sorted(profiles.items):
            p = profiles.items[iid]
            fh.write(_dump({"iid": iid, "title": p.title, "description": p.description}) + "\n")


def read_jsonl(path, fields: tuple[str, ...]):
    """Yield records from a JSON Lines file, checking that ``fields`` are present."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path.name}: malformed JSON on line {lineno}: {exc.msg}") from None
            if not isinstance(rec, dict):
                raise DatasetError(f"{path.name}: line {lineno} is not a JSON object")
            for f in fields:
                if f not in rec:
                    raise DatasetError(f"{path.name}: line {lineno} is missing field {f!r}")
            yield rec


def load_dataset(path) -> tuple[list[ExplanationSample], Profiles]:
    root = Path(path)
    for name in (SAMPLES_FILE, USERS_FILE, ITEMS_FILE):
        if not (root / name).exists():
            raise FileNotFoundError(f"dataset file {root / name} not found")
    samples = []
    seen = set()
    for rec in read_jsonl(root / SAMPLES_FILE, ("uid", "iid", "explanation", "split")):
        if rec["split"] not in SPLITS:
            raise DatasetError(f"{SAMPLES_FILE}: unknown split {rec['split']!r}")
        key = (int(rec["uid"]), int(rec["iid"]))
        if key in seen:
            raise DatasetError(f"{SAMPLES_FILE}: duplicate (uid, iid) pair {key}")
        seen.add(key)
        samples.append(ExplanationSample(key[0], key[1], rec["explanation"], rec["split"]))
    profiles = Profiles()
    for rec in read_jsonl(root / USERS_FILE, ("uid", "profile")):
        profiles.users[int(rec["uid"])] = rec["profile"]
    for rec in read_jsonl(root / ITEMS_FILE, ("iid", "title", "description")):
        profiles.items[int(rec["iid"])] = ItemProfile(rec["title"], rec["description"])
    return samples, profiles
