"""Dialogue data model, bAbI-format I/O, entity tagging and memory construction."""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence, TextIO

import numpy as np

PAD, UNK, SOS, EOS, SENTINEL = "<pad>", "<unk>", "<sos>", "<eos>", "$$$"
RESERVED = (PAD, UNK, SOS, EOS, SENTINEL)
USER_MARK, SYSTEM_MARK, RETRIEVED_MARK = "$u", "$s", "$r"
MAX_TURN_MARK = 16
MARKERS = (USER_MARK, SYSTEM_MARK, RETRIEVED_MARK) + tuple(f"turn_{k}" for k in range(MAX_TURN_MARK + 1))

EW, NEW = "EW", "NEW"


class ParseError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


def tokenize(text: str) -> tuple[str, ...]:
    return tuple(text.lower().split())


@dataclass(frozen=True)
class KBTriple:
    subject: str
    relation: str
    object: str

    def __post_init__(self):
        if not (self.subject and self.relation and self.object):
            raise ValueError(f"empty token in triple {self}")

    def tokens(self) -> tuple[str, str, str]:
        return (self.subject, self.relation, self.object)


@dataclass(frozen=True)
class Utterance:
    speaker: str  # "user" | "system"
    tokens: tuple[str, ...]


@dataclass(frozen=True)
class Turn:
    user: tuple[str, ...]
    system: tuple[str, ...]


@dataclass
class Dialogue:
    turns: list[Turn]
    kb: list[KBTriple] = field(default_factory=list)
    domain: str | None = None

    def utterances(self) -> list[Utterance]:
        out = []
        for t in self.turns:
            out.append(Utterance("user", t.user))
            out.append(Utterance("system", t.system))
        return out

    def to_json(self) -> dict:
        obj = {
            "turns": [{"user": list(t.user), "system": list(t.system)} for t in self.turns],
            "kb": [list(k.tokens()) for k in self.kb],
        }
        if self.domain is not None:
            obj["domain"] = self.domain
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "Dialogue":
        turns = [Turn(tuple(t["user"]), tuple(t["system"])) for t in obj["turns"]]
        kb = [KBTriple(*k) for k in obj.get("kb", [])]
        return cls(turns, kb, obj.get("domain"))


@dataclass(frozen=True)
class QAPair:
    question: tuple[str, ...]
    answer: tuple[str, ...]
    dialogue_id: int = -1
    turn_id: int = -1


# ------------------------------------------------------------------ bAbI text format


def parse_babi(stream: TextIO | Iterable[str] | str) -> list[Dialogue]:
    """Parse bAbI dialog text.

    Lines are ``N user<TAB>system`` or KB facts ``N subj rel obj``; a blank
    line ends a dialogue. The index restarting at 1 also starts a dialogue.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    dialogues: list[Dialogue] = []
    turns: list[Turn] = []
    kb: list[KBTriple] = []

    def flush():
        nonlocal turns, kb
        if turns or kb:
            if not turns:
                raise ParseError(line_no, "dialogue has KB facts but no turns")
            dialogues.append(Dialogue(turns, kb))
        turns, kb = [], []

    line_no = 0
    for line_no, raw in enumerate(stream, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            flush()
            continue
        head, _, rest = line.partition(" ")
        if not head.isdigit() or not rest:
            raise ParseError(line_no, f"expected '<index> <content>', got {line!r}")
        if int(head) == 1 and (turns or kb):
            flush()
        if "\t" in rest:
            user, _, system = rest.partition("\t")
            system = system.split("\t")[0]
            u, s = tokenize(user), tokenize(system)
            if not u or not s:
                raise ParseError(line_no, "turn with an empty side")
            turns.append(Turn(u, s))
        else:
            parts = tokenize(rest)
            if len(parts) != 3:
                raise ParseError(line_no, f"KB fact must have 3 tokens, got {len(parts)}")
            kb.append(KBTriple(*parts))
    flush()
    return dialogues


def serialize_babi(dialogues: Sequence[Dialogue]) -> str:
    """Inverse of :func:`parse_babi`: KB facts first, then turns, blank-line separated."""
    blocks = []
    for d in dialogues:
        lines = []
        n = 1
        for k in d.kb:
            lines.append(f"{n} {k.subject} {k.relation} {k.object}")
            n += 1
        for t in d.turns:
            lines.append(f"{n} {' '.join(t.user)}\t{' '.join(t.system)}")
            n += 1
        blocks.append("\n".join(lines) + "\n")
    return "\n".join(blocks)


def write_jsonl(dialogues: Sequence[Dialogue]) -> str:
    return "".join(json.dumps(d.to_json(), sort_keys=True) + "\n" for d in dialogues)


def read_jsonl(stream: TextIO | Iterable[str] | str) -> list[Dialogue]:
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    out = []
    for line_no, line in enumerate(stream, start=1):
        if not line.strip():
            continue
        try:
            out.append(Dialogue.from_json(json.loads(line)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(line_no, f"bad dialogue record: {exc}") from exc
    return out


def load_dialogues(path) -> list[Dialogue]:
    """Read a ``.jsonl`` file, or anything else as bAbI text."""
    path = str(path)
    with open(path, encoding="utf-8") as f:
        if path.endswith(".jsonl") or path.endswith(".json"):
            return read_jsonl(f)
        return parse_babi(f)


# ------------------------------------------------------------------ entities


def kb_entities(kb: Iterable[KBTriple]) -> frozenset[str]:
    """Subjects and objects of the KB; relations are not entities."""
    ents = set()
    for k in kb:
        ents.add(k.subject)
        ents.add(k.object)
    return frozenset(ents)


def tag_tokens(tokens: Sequence[str], entities: frozenset[str] | set[str]) -> list[str]:
    return [EW if tok in entities else NEW for tok in tokens]


def tag_entities(dialogue: Dialogue) -> list[list[str]]:
    ents = kb_entities(dialogue.kb)
    return [tag_tokens(u.tokens, ents) for u in dialogue.utterances()]


# ------------------------------------------------------------------ memory sequences


@dataclass(frozen=True)
class MemoryItem:
    emit_token: str
    feature_tokens: tuple[str, ...]
    speaker_tag: str  # "user" | "system" | "kb" | "retrieved" | "sentinel"
    turn_index: int
    tag: str
    is_sentinel: bool = False


SENTINEL_ITEM = MemoryItem(SENTINEL, (SENTINEL,), "sentinel", 0, NEW, True)


@dataclass
class EncodedContext:
    items: list[MemoryItem]
    r_h: np.ndarray
    n_history: int
    query: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.items)

    @property
    def sentinel(self) -> int:
        return len(self.items) - 1


def turn_mark(k: int) -> str:
    return f"turn_{min(k, MAX_TURN_MARK)}"


def build_context(history: Sequence[Sequence[str]], kb: Sequence[KBTriple],
                  mask_new: bool = True) -> EncodedContext:
    """Memory for ``[u_1, s_1, ..., u_i ; KB]`` followed by the sentinel.

    ``history`` alternates user and system utterances and ends with a user
    utterance. With ``mask_new`` false every non-sentinel slot is copyable.
    """
    if not history:
        raise ValueError("build_context: empty history")
    if len(history) % 2 != 1:
        raise ValueError("build_context: history must end with a user utterance")
    ents = kb_entities(kb)
    items: list[MemoryItem] = []
    for j, utt in enumerate(history):
        turn = j // 2
        speaker = "user" if j % 2 == 0 else "system"
        mark = USER_MARK if speaker == "user" else SYSTEM_MARK
        for tok in utt:
            items.append(MemoryItem(tok, (tok, mark, turn_mark(turn)), speaker, turn,
                                    EW if tok in ents else NEW))
    n_history = len(items)
    for k in kb:
        items.append(MemoryItem(k.object, k.tokens(), "kb", 0, EW))
    items.append(SENTINEL_ITEM)
    if mask_new:
        r_h = np.array([it.tag == EW and not it.is_sentinel for it in items], dtype=bool)
    else:
        r_h = np.ones(len(items), dtype=bool)
        r_h[-1] = False
    return EncodedContext(items, r_h, n_history, tuple(history[-1]))


def extract_qa_pairs(dialogues: Sequence[Dialogue]) -> list[QAPair]:
    return [QAPair(t.user, t.system, d_id, t_id)
            for d_id, d in enumerate(dialogues) for t_id, t in enumerate(d.turns)]


# ------------------------------------------------------------------ vocabulary


class Vocabulary:
    """Token/index bijection; reserved symbols first, then markers, then sorted corpus tokens."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = []
        self.stoi: dict[str, int] = {}
        for tok in RESERVED + MARKERS:
            self._add(tok)
        for tok in sorted(set(tokens)):
            self._add(tok)

    def _add(self, tok: str) -> None:
        if tok not in self.stoi:
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, tok: str) -> bool:
        return tok in self.stoi

    def index(self, tok: str) -> int:
        return self.stoi.get(tok, self.stoi[UNK])

    def token(self, idx: int) -> str:
        return self.itos[idx]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.index(t) for t in tokens]

    @classmethod
    def from_list(cls, itos: Sequence[str]) -> "Vocabulary":
        v = cls.__new__(cls)
        v.itos = list(itos)
        v.stoi = {t: i for i, t in enumerate(v.itos)}
        if len(v.stoi) != len(v.itos) or tuple(v.itos[:len(RESERVED)]) != RESERVED:
            raise ValueError("vocabulary list is not a valid bijection with reserved prefix")
        return v


def build_vocab(dialogues: Sequence[Dialogue], extra: Iterable[str] = ()) -> Vocabulary:
    toks: set[str] = set(extra)
    for d in dialogues:
        for t in d.turns:
            toks.update(t.user)
            toks.update(t.system)
        for k in d.kb:
            toks.update(k.tokens())
    return Vocabulary(toks)


# ------------------------------------------------------------------ synthetic generator


CUISINES = ("british", "cantonese", "french", "indian", "italian",
            "japanese", "korean", "spanish", "thai", "vietnamese")
LOCATIONS = ("bangkok", "beijing", "bombay", "hanoi", "london",
             "madrid", "paris", "rome", "seoul", "tokyo")
PARTY_SIZES = ("two", "four", "six", "eight")
PRICES = ("cheap", "moderate", "expensive")
SLOT_ORDER = ("cuisine", "location", "number", "price")

GREETINGS = ("hi", "hello", "good morning", "hey there")
GREET_REPLY = "hello what can i help you with today"
BOOK_OPENERS = ("can you book a table", "i'd like to book a table", "may i have a table")
SLOT_PHRASES = {
    "cuisine": ("with {} food", "with {} cuisine"),
    "location": ("in {}",),
    "number": ("for {} people", "for {}"),
    "price": ("in a {} price range",),
}
SLOT_ANSWERS = {
    "cuisine": ("{} food please", "i love {} food"),
    "location": ("{} please", "in {}"),
    "number": ("we will be {}", "for {} please"),
    "price": ("i am looking for a {} restaurant", "{} please"),
}
SLOT_ASKS = {
    "cuisine": "any preference on a type of cuisine",
    "location": "where should it be",
    "number": "how many people would be in your party",
    "price": "which price range are looking for",
}
ON_IT = "i'm on it"
LOOKING = "ok let me look into some options for you"
SILENCE = "<silence>"
LOOKUPS = {
    "phone": (("may i have the phone number of {r}", "what is the phone number of {r}"),
              "here it is {v}"),
    "address": (("what is the address of {r}", "can you give me the address of {r}"),
                "the address of {r} is {v}"),
    "price": (("what is the price range of {r}",), "{r} is in the {v} price range"),
    "cuisine": (("what kind of food does {r} serve",), "{r} serves {v} food"),
}
THANKS, WELCOME = "thank you", "you're welcome"


@dataclass(frozen=True)
class SyntheticConfig:
    n_restaurants: int = 20
    n_dialogues: int = 100
    task_style: str = "slots"  # slots | kb_lookup | full
    seed: int = 0
    distractors: int = 1  # other restaurants listed in each dialogue's KB

    def validate(self) -> None:
        from .numerics import ConfigurationError
        if self.n_restaurants < 4:
            raise ConfigurationError(f"n_restaurants must be >= 4, got {self.n_restaurants}")
        if self.n_dialogues < 1:
            raise ConfigurationError(f"n_dialogues must be >= 1, got {self.n_dialogues}")
        if not 0 <= self.distractors < self.n_restaurants:
            raise ConfigurationError(f"distractors must be in [0, n_restaurants), got {self.distractors}")
        if self.task_style not in ("slots", "kb_lookup", "full"):
            raise ConfigurationError(f"unknown task_style {self.task_style!r}")


@dataclass(frozen=True)
class Restaurant:
    name: str
    cuisine: str
    location: str
    number: str
    price: str

    @property
    def phone(self) -> str:
        return f"{self.name}_phone"

    @property
    def address(self) -> str:
        return f"{self.name}_address"

    def attribute(self, key: str) -> str:
        return getattr(self, key)

    def triples(self, keys: Sequence[str]) -> list[KBTriple]:
        return [KBTriple(self.name, f"r_{k}", self.attribute(k)) for k in keys]


def _restaurant_pool(n: int, rng: np.random.Generator) -> list[Restaurant]:
    pool, names = [], set()
    while len(pool) < n:
        c = CUISINES[rng.integers(len(CUISINES))]
        loc = LOCATIONS[rng.integers(len(LOCATIONS))]
        p = PRICES[rng.integers(len(PRICES))]
        num = PARTY_SIZES[rng.integers(len(PARTY_SIZES))]
        stars = int(rng.integers(1, 9))
        name = f"resto_{loc}_{p}_{c}_{stars}stars"
        if name in names:
            continue
        names.add(name)
        pool.append(Restaurant(name, c, loc, num, p))
    return pool


def _pick(rng: np.random.Generator, seq: Sequence[str]) -> str:
    return seq[int(rng.integers(len(seq)))]


def _slot_turns(r: Restaurant, rng: np.random.Generator) -> list[Turn]:
    values = {s: r.attribute(s) for s in SLOT_ORDER}
    revealed = [s for s in SLOT_ORDER if rng.random() < 0.5]
    missing = [s for s in SLOT_ORDER if s not in revealed]
    request = _pick(rng, BOOK_OPENERS)
    for s in revealed:
        request += " " + _pick(rng, SLOT_PHRASES[s]).format(values[s])
    turns = [Turn(tokenize(_pick(rng, GREETINGS)), tokenize(GREET_REPLY)),
             Turn(tokenize(request), tokenize(ON_IT))]
    user = SILENCE
    for s in missing:
        turns.append(Turn(tokenize(user), tokenize(SLOT_ASKS[s])))
        user = _pick(rng, SLOT_ANSWERS[s]).format(values[s])
    turns.append(Turn(tokenize(user), tokenize(LOOKING)))
    call = "api_call " + " ".join(values[s] for s in SLOT_ORDER)
    turns.append(Turn(tokenize(SILENCE), tokenize(call)))
    return turns


def _lookup_turns(r: Restaurant, rng: np.random.Generator, n: int) -> list[Turn]:
    keys = list(LOOKUPS)
    order = rng.permutation(len(keys))[:n]
    turns = []
    for i in order:
        key = keys[int(i)]
        questions, answer = LOOKUPS[key]
        q = _pick(rng, questions).format(r=r.name)
        turns.append(Turn(tokenize(q), tokenize(answer.format(r=r.name, v=r.attribute(key)))))
    return turns


def generate_synthetic(config: SyntheticConfig) -> list[Dialogue]:
    """Deterministic bAbI-style restaurant dialogues.

    ``slots`` dialogues gather cuisine/location/party size/price and end in an
    ``api_call``; ``kb_lookup`` dialogues answer attribute questions from KB
    triples; ``full`` does both in one dialogue.
    """
    config.validate()
    rng = np.random.Generator(np.random.PCG64(config.seed))
    pool = _restaurant_pool(config.n_restaurants, rng)
    slot_keys = list(SLOT_ORDER)
    all_keys = slot_keys + ["phone", "address"]
    dialogues = []
    for _ in range(config.n_dialogues):
        picked = rng.choice(len(pool), size=1 + config.distractors, replace=False)
        listed = [pool[int(i)] for i in picked]
        target = listed[0]
        if config.task_style == "slots":
            turns = _slot_turns(target, rng)
            keys = slot_keys
        elif config.task_style == "kb_lookup":
            turns = [Turn(tokenize(_pick(rng, GREETINGS)), tokenize(GREET_REPLY))]
            turns += _lookup_turns(target, rng, int(rng.integers(1, 4)))
            turns.append(Turn(tokenize(THANKS), tokenize(WELCOME)))
            keys = all_keys
        else:
            turns = _slot_turns(target, rng)
            turns += _lookup_turns(target, rng, int(rng.integers(1, 3)))
            turns.append(Turn(tokenize(THANKS), tokenize(WELCOME)))
            keys = all_keys
        kb = [t for r in listed for t in r.triples(keys)]
        dialogues.append(Dialogue(turns, kb, config.task_style))
    return dialogues


def iter_examples(dialogues: Sequence[Dialogue]) -> Iterator[tuple[int, int, list[tuple[str, ...]], tuple[str, ...]]]:
    """Yield ``(dialogue_id, turn_id, history, gold)`` for every system turn."""
    for d_id, d in enumerate(dialogues):
        history: list[tuple[str, ...]] = []
        for t_id, t in enumerate(d.turns):
            history.append(t.user)
            yield d_id, t_id, list(history), t.system
            history.append(t.system)
