"""Synthetic counterfactual fact corpus."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .._io import atomic_write_text
from ..osfusion import EditRequest

# relation -> (templates, objects); templates[0] is the edit prompt, the rest are paraphrases
RELATIONS: dict[str, tuple[tuple[str, ...], tuple[str, ...]]] = {
    "country": (
        ("{} is located in the country of", "The country that contains {} is", "{} can be found in the country of"),
        ("France", "Japan", "Brazil", "Canada", "Egypt", "Norway", "India", "Mexico"),
    ),
    "language": (
        ("The native language of {} is", "{} grew up speaking the language", "The mother tongue of {} is"),
        ("French", "Japanese", "Portuguese", "Swahili", "Arabic", "Finnish", "Hindi", "Spanish"),
    ),
    "instrument": (
        ("{} plays the instrument", "The instrument played by {} is the", "{} is known for playing the"),
        ("piano", "violin", "guitar", "cello", "flute", "trumpet", "harp", "drums"),
    ),
    "field": (
        ("{} works in the field of", "The field of work of {} is", "{} is a specialist in"),
        ("physics", "biology", "chemistry", "economics", "history", "medicine", "geology", "linguistics"),
    ),
    "city": (
        ("{} was born in the city of", "The birthplace of {} is the city of", "{} came into the world in the city of"),
        ("Paris", "Tokyo", "Lagos", "Toronto", "Cairo", "Oslo", "Mumbai", "Lima"),
    ),
    "sport": (
        ("{} plays the sport of", "The favorite sport of {} is", "{} competes professionally in"),
        ("tennis", "football", "hockey", "cricket", "rugby", "golf", "baseball", "volleyball"),
    ),
    "color": (
        ("The favorite color of {} is", "{} likes the color", "{} always wears the color"),
        ("red", "blue", "green", "yellow", "purple", "orange", "black", "white"),
    ),
    "employer": (
        ("{} works for the company", "The employer of {} is the company", "{} is employed by the company"),
        ("Google", "Nokia", "Toyota", "Siemens", "Nestle", "Boeing", "Samsung", "Intel"),
    ),
}

_ONSETS = ("b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "kr", "st", "th", "v")
_VOWELS = ("a", "e", "i", "o", "u", "ai", "ou")
_CODAS = ("", "", "n", "r", "s", "l", "th", "x")


@dataclass(frozen=True)
class Fact:
    subject: str
    relation: str
    object: str

    def prompts(self) -> list[str]:
        return [t.format(self.subject) for t in RELATIONS[self.relation][0]]

    def sentences(self) -> list[str]:
        return [f"{p} {self.object} ." for p in self.prompts()]


@dataclass
class FactCorpus:
    facts: list[Fact]
    edit_subjects: list[str]
    neighbor_subjects: list[str]
    seed: int = 0
    templates: dict[str, tuple[str, ...]] = field(default_factory=lambda: {r: t for r, (t, _) in RELATIONS.items()})

    def sentences(self) -> list[str]:
        return [s for f in self.facts for s in f.sentences()]

    def by_subject(self) -> dict[str, Fact]:
        return {f.subject: f for f in self.facts}

    def to_jsonl(self) -> str:
        edit = set(self.edit_subjects)
        lines = []
        for f in self.facts:
            lines.append(
                json.dumps(
                    {
                        "subject": f.subject,
                        "relation": f.relation,
                        "object": f.object,
                        "pool": "edit" if f.subject in edit else "neighborhood",
                        "prompts": f.prompts(),
                        "sentences": f.sentences(),
                    },
                    ensure_ascii=False,
                )
            )
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> FactCorpus:
        facts, edit, neigh = [], [], []
        for line in text.splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec["relation"] not in RELATIONS:
                raise ValueError(f"unknown relation {rec['relation']!r}")
            facts.append(Fact(rec["subject"], rec["relation"], rec["object"]))
            (edit if rec.get("pool") == "edit" else neigh).append(rec["subject"])
        return cls(facts, edit, neigh)

    def save(self, path: str | Path) -> None:
        atomic_write_text(path, self.to_jsonl())

    @classmethod
    def load(cls, path: str | Path) -> FactCorpus:
        return cls.from_jsonl(Path(path).read_text(encoding="utf-8"))


def _pseudo_words(rng: np.random.Generator, n: int, reserved: set[str]) -> list[str]:
    words, seen = [], {w.lower() for w in reserved}
    while len(words) < n:
        syll = int(rng.integers(2, 4))
        w = "".join(
            _ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))] for _ in range(syll)
        ) + _CODAS[rng.integers(len(_CODAS))]
        if w in seen:
            continue
        seen.add(w)
        words.append(w.capitalize())
    return words


def generate_corpus(
    n_facts: int,
    seed: int = 0,
    multi_token_fraction: float = 0.4,
    edit_fraction: float = 0.25,
) -> FactCorpus:
    """Deterministic corpus of ``n_facts`` facts, one per unique subject.

    Every subject word is used by exactly one subject, so no subject's token
    sequence occurs inside another subject or any template.
    """
    if n_facts < 1:
        raise ValueError("n_facts must be >= 1")
    rng = np.random.default_rng(seed)
    reserved = {w for tmpls, objs in RELATIONS.values() for t in tmpls for w in t.split()}
    reserved |= {o for _, objs in RELATIONS.values() for o in objs}
    n_multi = int(np.ceil(multi_token_fraction * n_facts))
    lengths = [1] * (n_facts - n_multi) + [int(rng.integers(2, 4)) for _ in range(n_multi)]
    lengths = [lengths[i] for i in rng.permutation(n_facts)]
    words = _pseudo_words(rng, sum(lengths), reserved)
    subjects, pos = [], 0
    for k in lengths:
        subjects.append(" ".join(words[pos : pos + k]))
        pos += k

    relations = list(RELATIONS)
    facts = []
    for i, subj in enumerate(subjects):
        rel = relations[i % len(relations)]
        objs = RELATIONS[rel][1]
        facts.append(Fact(subj, rel, objs[int(rng.integers(len(objs)))]))
    order = rng.permutation(n_facts)
    n_edit = int(round(edit_fraction * n_facts))
    edit = sorted((facts[i].subject for i in order[:n_edit]), key=subjects.index)
    neigh = sorted((facts[i].subject for i in order[n_edit:]), key=subjects.index)
    return FactCorpus(facts, edit, neigh, seed)


def make_requests(corpus: FactCorpus, n_requests: int, seed: int = 0, n_neighbors: int = 2) -> list[EditRequest]:
    """Counterfactual edit requests over the corpus' edit pool.

    Each new object is another object of the same relation that appears somewhere
    in the corpus, so it is in the vocabulary.  Neighborhood probes come from the
    disjoint neighborhood pool, share the request's relation, and have a true
    object different from the new one.
    """
    if n_requests > len(corpus.edit_subjects):
        raise ValueError(f"only {len(corpus.edit_subjects)} subjects in the edit pool")
    rng = np.random.default_rng(seed)
    facts = corpus.by_subject()
    used = {}
    for f in corpus.facts:
        used.setdefault(f.relation, [])
        if f.object not in used[f.relation]:
            used[f.relation].append(f.object)
    neigh_by_rel: dict[str, list[Fact]] = {}
    for s in corpus.neighbor_subjects:
        neigh_by_rel.setdefault(facts[s].relation, []).append(facts[s])

    chosen = [corpus.edit_subjects[i] for i in sorted(rng.choice(len(corpus.edit_subjects), n_requests, replace=False))]
    requests = []
    for i, subj in enumerate(chosen):
        fact = facts[subj]
        candidates = [o for o in used[fact.relation] if o != fact.object]
        if not candidates:
            raise ValueError(f"relation {fact.relation!r} has no alternative object in the corpus")
        new = candidates[int(rng.integers(len(candidates)))]
        pool = [f for f in neigh_by_rel.get(fact.relation, []) if f.object != new]
        if len(pool) < n_neighbors:
            raise ValueError(f"not enough neighborhood subjects for relation {fact.relation!r}")
        picks = rng.choice(len(pool), n_neighbors, replace=False)
        prompts = fact.prompts()
        requests.append(
            EditRequest(
                subject=subj,
                prompt=prompts[0],
                original_object=fact.object,
                new_object=new,
                paraphrases=prompts[1:],
                neighborhood=[(pool[j].prompts()[0], pool[j].object) for j in sorted(picks)],
                request_id=f"req-{i:04d}",
            )
        )
    return requests
