"""Deterministic generator of compositional multi-hop QG examples.

A world is a set of single-token entities plus relation instances sampled as
partial one-to-one matchings between category pools, so that every
descriptor phrase ("the director of film_3") identifies exactly one entity.
A chain of facts e_0 - f_1 - e_1 - ... - f_N - e_N yields one document per
fact; the 1-hop question asks for e_0 and each later fact rewrites the
previous question by replacing an entity mention with a descriptor.  The
gold N-hop question is therefore machine-reducible back to the answer.

Reference intermediate questions are emitted in a separate record field for
evaluation only; the trainer never reads them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import GenerationError

CATEGORIES = ("person", "film", "city", "country")


@dataclass(frozen=True)
class Relation:
    name: str
    subj_cat: str
    obj_cat: str
    fact: tuple[str, ...]       # sentence template, {subj}/{obj} placeholders
    question: tuple[str, ...]   # asks for the subject given the object
    subj_desc: tuple[str, ...]  # describes the subject via the object
    obj_desc: tuple[str, ...]   # describes the object via the subject


RELATIONS: tuple[Relation, ...] = (
    Relation(
        "directed_by", "person", "film",
        fact=("{subj}", "directed", "{obj}", "."),
        question=("who", "directed", "{obj}", "?"),
        subj_desc=("the", "director", "of", "{obj}"),
        obj_desc=("the", "film", "directed", "by", "{subj}"),
    ),
    Relation(
        "starred_in", "person", "film",
        fact=("{subj}", "starred", "in", "{obj}", "."),
        question=("who", "starred", "in", "{obj}", "?"),
        subj_desc=("the", "star", "of", "{obj}"),
        obj_desc=("the", "film", "starring", "{subj}"),
    ),
    Relation(
        "born_in", "person", "city",
        fact=("{subj}", "was", "born", "in", "{obj}", "."),
        question=("who", "was", "born", "in", "{obj}", "?"),
        subj_desc=("the", "person", "born", "in", "{obj}"),
        obj_desc=("the", "birthplace", "of", "{subj}"),
    ),
    Relation(
        "located_in", "city", "country",
        fact=("{subj}", "is", "located", "in", "{obj}", "."),
        question=("what", "city", "is", "located", "in", "{obj}", "?"),
        subj_desc=("the", "city", "located", "in", "{obj}"),
        obj_desc=("the", "country", "containing", "{subj}"),
    ),
)

RELATION_BY_NAME = {r.name: r for r in RELATIONS}

MAX_HOPS = 4


@dataclass(frozen=True)
class Fact:
    relation: str
    subj: str
    obj: str

    def other(self, entity: str) -> str:
        return self.obj if entity == self.subj else self.subj


@dataclass
class World:
    entities: dict[str, list[str]]   # category -> tokens
    facts: list[Fact]

    def facts_of(self, entity: str) -> list[Fact]:
        return self._by_entity.get(entity, [])

    def finalize(self) -> "World":
        self._by_entity: dict[str, list[Fact]] = {}
        for f in self.facts:
            self._by_entity.setdefault(f.subj, []).append(f)
            self._by_entity.setdefault(f.obj, []).append(f)
        return self

    @property
    def all_entities(self) -> list[str]:
        return [e for cat in CATEGORIES for e in self.entities.get(cat, [])]


@dataclass(frozen=True)
class Chain:
    facts: tuple[Fact, ...]       # f_1..f_N
    entities: tuple[str, ...]     # e_0..e_N, e_0 is the answer

    @property
    def hops(self) -> int:
        return len(self.facts)

    @property
    def signature(self) -> tuple[str, ...]:
        return self.entities


def generate_world(seed: int, sizes: Mapping[str, int] | int) -> World:
    """Entity pools plus one partial matching per relation type.

    Matchings keep every descriptor direction unique: an entity fills each
    (relation, role) slot at most once.
    """
    if isinstance(sizes, int):
        sizes = {cat: sizes for cat in CATEGORIES}
    rng = np.random.default_rng(seed)
    entities = {
        cat: [f"{cat}_{i}" for i in range(int(sizes.get(cat, 0)))]
        for cat in CATEGORIES
    }
    facts: list[Fact] = []
    for rel in RELATIONS:
        subjects = list(entities[rel.subj_cat])
        objects = list(entities[rel.obj_cat])
        k = min(len(subjects), len(objects))
        if k == 0:
            continue
        subj_pick = rng.permutation(len(subjects))[:k]
        obj_pick = rng.permutation(len(objects))[:k]
        for si, oi in zip(subj_pick, obj_pick):
            facts.append(Fact(rel.name, subjects[int(si)], objects[int(oi)]))
    return World(entities, facts).finalize()


# ---------------------------------------------------------------------------
# chains and questions


def _extensions(world: World, entity: str, used: set[str], used_facts: set[Fact]):
    """Facts that can describe ``entity`` via a fresh neighbor."""
    out = []
    for f in world.facts_of(entity):
        if f in used_facts:
            continue
        if f.other(entity) in used:
            continue
        out.append(f)
    return out


def enumerate_chains(world: World, hops: int) -> list[Chain]:
    """All valid chains of the requested length, deduplicated by their
    entity signature, in deterministic order."""
    if not 1 <= hops <= MAX_HOPS:
        raise GenerationError(f"hops must be in 1..{MAX_HOPS}, got {hops}")
    chains: list[Chain] = []
    seen: set[tuple[str, ...]] = set()

    def extend(facts: list[Fact], ents: list[str]):
        if len(facts) == hops:
            chain = Chain(tuple(facts), tuple(ents))
            if chain.signature not in seen:
                seen.add(chain.signature)
                chains.append(chain)
            return
        tip = ents[-1]
        for f in _extensions(world, tip, set(ents), set(facts)):
            extend([*facts, f], [*ents, f.other(tip)])

    for f1 in world.facts:
        extend([f1], [f1.subj, f1.obj])
    return chains


def _fill(template: Sequence[str], subj: str | None = None, obj: str | None = None):
    out = []
    for tok in template:
        if tok == "{subj}":
            out.append(subj)
        elif tok == "{obj}":
            out.append(obj)
        else:
            out.append(tok)
    return out


def descriptor_tokens(fact: Fact, described: str) -> list[str]:
    """The phrase that uniquely identifies ``described`` using the fact's
    other entity."""
    rel = RELATION_BY_NAME[fact.relation]
    if described == fact.subj:
        return _fill(rel.subj_desc, obj=fact.obj)
    if described == fact.obj:
        return _fill(rel.obj_desc, subj=fact.subj)
    raise GenerationError(f"{described} is not part of {fact}")


def fact_sentence(fact: Fact) -> list[str]:
    rel = RELATION_BY_NAME[fact.relation]
    return _fill(rel.fact, subj=fact.subj, obj=fact.obj)


def chain_questions(chain: Chain) -> list[list[str]]:
    """Q^1..Q^N by iterated descriptor substitution."""
    rel1 = RELATION_BY_NAME[chain.facts[0].relation]
    questions = [_fill(rel1.question, obj=chain.entities[1])]
    for t in range(1, chain.hops):
        prev = questions[-1]
        target = chain.entities[t]
        hits = [i for i, tok in enumerate(prev) if tok == target]
        if len(hits) != 1:
            raise GenerationError(
                f"entity {target} occurs {len(hits)} times in {' '.join(prev)}"
            )
        desc = descriptor_tokens(chain.facts[t], target)
        i = hits[0]
        questions.append([*prev[:i], *desc, *prev[i + 1 :]])
    return questions


def sample_chain(world: World, hops: int, rng: np.random.Generator) -> Chain:
    for _ in range(200):
        if not world.facts:
            break
        f1 = world.facts[int(rng.integers(len(world.facts)))]
        facts, ents = [f1], [f1.subj, f1.obj]
        ok = True
        while len(facts) < hops:
            options = _extensions(world, ents[-1], set(ents), set(facts))
            if not options:
                ok = False
                break
            f = options[int(rng.integers(len(options)))]
            ents.append(f.other(ents[-1]))
            facts.append(f)
        if ok:
            return Chain(tuple(facts), tuple(ents))
    raise GenerationError(
        f"no {hops}-hop chain found; the world is too small or too sparse"
    )


# ---------------------------------------------------------------------------
# records


def _distractor_facts(
    world: World, used: set[str], count: int, rng: np.random.Generator
) -> list[Fact]:
    picked: list[Fact] = []
    candidates = [
        f for f in world.facts if f.subj not in used and f.obj not in used
    ]
    for _ in range(count):
        if not candidates:
            break
        f = candidates[int(rng.integers(len(candidates)))]
        picked.append(f)
        used.update((f.subj, f.obj))
        candidates = [
            c for c in candidates if c.subj not in used and c.obj not in used
        ]
    return picked


def record_from_chain(
    world: World, chain: Chain, rng: np.random.Generator, example_id: str
) -> dict:
    """One dataset record: shuffled documents with entity annotations, the
    gold final question, and reference intermediates (evaluation only)."""
    questions = chain_questions(chain)
    used = set(chain.entities)
    docs = []
    for t, fact in enumerate(chain.facts):
        n_distract = 1 + int(rng.integers(0, 2))
        distractors = _distractor_facts(world, used, n_distract, rng)
        if not distractors:
            raise GenerationError(
                "not enough free entities for distractor sentences; "
                "grow the world sizes"
            )
        sentences = [fact_sentence(d) for d in distractors]
        slot = int(rng.integers(len(sentences) + 1))
        sentences.insert(slot, fact_sentence(fact))
        text = [tok for s in sentences for tok in s]
        doc_entities = {chain.entities[t], chain.entities[t + 1]}
        doc_entities.update(e for d in distractors for e in (d.subj, d.obj))
        docs.append(
            {
                "title": chain.entities[t + 1],
                "text": " ".join(text),
                "is_answer_doc": t == 0,
                "entities": sorted(doc_entities),
            }
        )
    order = rng.permutation(len(docs))
    return {
        "id": example_id,
        "hops": chain.hops,
        "answer": chain.entities[0],
        "question": " ".join(questions[-1]),
        "documents": [docs[int(i)] for i in order],
        "reference_intermediates": [" ".join(q) for q in questions[:-1]],
    }


def generate_example(world: World, hops: int, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    return record_from_chain(
        world, sample_chain(world, hops, rng), rng, f"ex-{hops}hop-{seed}"
    )


# ---------------------------------------------------------------------------
# entity renaming (training-split augmentation)


def _entity_category(token: str) -> str | None:
    for cat in CATEGORIES:
        if token.startswith(cat + "_"):
            return cat
    return None


def rename_record_entities(
    world: World, rec: dict, rng: np.random.Generator
) -> tuple[dict, dict[str, str]]:
    """Bijectively rename the record's entities within their category pools.

    The record stays internally consistent (documents, annotations, question
    and intermediates are renamed together), so it describes a different,
    equally valid world.  Returns the renamed record and the token map.
    """
    maps: dict[str, dict[str, str]] = {}
    for cat in CATEGORIES:
        pool = world.entities[cat]
        perm = rng.permutation(len(pool))
        maps[cat] = {pool[i]: pool[int(j)] for i, j in enumerate(perm)}

    def m_tok(tok: str) -> str:
        cat = _entity_category(tok)
        return maps[cat][tok] if cat else tok

    def m_text(text: str) -> str:
        return " ".join(m_tok(t) for t in text.split())

    out = dict(rec)
    out["answer"] = m_text(rec["answer"])
    out["question"] = m_text(rec["question"])
    out["reference_intermediates"] = [
        m_text(q) for q in rec.get("reference_intermediates", [])
    ]
    out["documents"] = [
        {
            "title": m_text(d["title"]),
            "text": m_text(d["text"]),
            "is_answer_doc": d["is_answer_doc"],
            "entities": sorted(m_text(e) for e in d["entities"]),
        }
        for d in rec["documents"]
    ]
    flat = {tok: new for cat_map in maps.values() for tok, new in cat_map.items()}
    return out, flat


def make_splits(
    world: World,
    hops_list: Sequence[int],
    counts: tuple[int, int, int],
    seed: int,
    rename_train: bool = True,
) -> dict[str, list[dict]]:
    """Train/validation/test records with disjoint chain signatures.

    Chain signatures are partitioned across splits (test and validation
    signatures never occur in train); records within a split may revisit a
    signature with fresh distractors and document order when more examples
    than signatures are requested.  With ``rename_train`` every training
    record additionally gets a category-preserving entity renaming, so the
    entity combinations seen in training churn while validation and test
    keep the fixed world; renamings that would collide with a held-out
    signature are rejected.
    """
    n_train, n_valid, n_test = counts
    if min(counts) < 0 or max(counts) == 0:
        raise GenerationError(f"bad split counts {counts}")
    splits: dict[str, list[dict]] = {"train": [], "valid": [], "test": []}
    for hops in hops_list:
        pool = enumerate_chains(world, hops)
        rng = np.random.default_rng((seed, hops, 0xC0FFEE))
        rng.shuffle(pool)
        wanted = sum(1 for c in counts if c > 0)
        if len(pool) < max(wanted, 3):
            raise GenerationError(
                f"only {len(pool)} distinct {hops}-hop chains available; "
                f"need at least {max(wanted, 3)}; grow the world sizes"
            )
        n_test_sig = max(1, min(n_test, len(pool) // 5)) if n_test else 0
        n_valid_sig = max(1, min(n_valid, len(pool) // 10)) if n_valid else 0
        chains = {
            "test": pool[:n_test_sig],
            "valid": pool[n_test_sig : n_test_sig + n_valid_sig],
            "train": pool[n_test_sig + n_valid_sig :],
        }
        # a renamed world can express the same surface question through a
        # different entity chain, so reserve the observable pair
        reserved = {
            (c.entities[0], " ".join(chain_questions(c)[-1]))
            for c in (*chains["test"], *chains["valid"])
        }
        for split, want in (("train", n_train), ("valid", n_valid), ("test", n_test)):
            sig_pool = chains[split]
            if want and not sig_pool:
                raise GenerationError(f"no {hops}-hop chains left for {split}")
            for i in range(want):
                chain = sig_pool[i % len(sig_pool)]
                rec = record_from_chain(world, chain, rng, f"{split}-{hops}hop-{i:05d}")
                if split == "train" and rename_train:
                    for _ in range(64):
                        renamed, _ = rename_record_entities(world, rec, rng)
                        if (renamed["answer"], renamed["question"]) not in reserved:
                            rec = renamed
                            break
                    else:
                        raise GenerationError(
                            "could not rename a training record away from "
                            "held-out signatures"
                        )
                splits[split].append(rec)
    return splits


def collect_tokens(records: Sequence[dict]) -> set[str]:
    """Every token that appears anywhere in the given records."""
    tokens: set[str] = set()
    for rec in records:
        tokens.update(rec["answer"].split())
        tokens.update(rec["question"].split())
        for doc in rec["documents"]:
            tokens.update(doc["title"].split())
            tokens.update(doc["text"].split())
            for e in doc["entities"]:
                tokens.update(e.split())
        for q in rec.get("reference_intermediates", []):
            tokens.update(q.split())
    return tokens


# ---------------------------------------------------------------------------
# reduction oracle


def _find_subsequence(haystack: Sequence[str], needle: Sequence[str]) -> list[int]:
    hits = []
    n = len(needle)
    for i in range(len(haystack) - n + 1):
        if list(haystack[i : i + n]) == list(needle):
            hits.append(i)
    return hits


def parse_facts(record: dict) -> list[Fact]:
    """Recover the fact list from a record's document sentences by inverting
    the sentence templates.  Works on renamed records too, which carry
    their own self-consistent facts."""
    facts: list[Fact] = []
    for doc in record["documents"]:
        tokens = doc["text"].split()
        sentence: list[str] = []
        for tok in tokens:
            sentence.append(tok)
            if tok != ".":
                continue
            for rel in RELATIONS:
                if len(rel.fact) != len(sentence):
                    continue
                subj = obj = None
                for pat, got in zip(rel.fact, sentence):
                    if pat == "{subj}":
                        subj = got
                    elif pat == "{obj}":
                        obj = got
                    elif pat != got:
                        break
                else:
                    facts.append(Fact(rel.name, subj, obj))
                    break
            sentence = []
    return facts


def reduce_question(
    facts: Sequence[Fact], question: Sequence[str]
) -> tuple[str, list[list[str]]]:
    """Resolve a generated question back to its answer using only a fact
    table: repeatedly replace the innermost instantiated descriptor with the
    entity it identifies, then answer the remaining 1-hop question.

    Returns (answer, trail of progressively simpler questions).
    """
    q = list(question)
    trail = [list(q)]
    for _ in range(MAX_HOPS + 1):
        for rel in RELATIONS:
            for fact in facts:
                if fact.relation != rel.name:
                    continue
                filled = _fill(rel.question, obj=fact.obj)
                if q == filled:
                    trail.append([fact.subj])
                    return fact.subj, trail
        matches = []
        for fact in facts:
            for described in (fact.subj, fact.obj):
                desc = descriptor_tokens(fact, described)
                for pos in _find_subsequence(q, desc):
                    matches.append((pos, desc, described))
        if not matches:
            raise GenerationError(f"cannot reduce question: {' '.join(q)}")
        if len({(pos, tuple(desc)) for pos, desc, _ in matches}) != 1:
            raise GenerationError(
                f"ambiguous reduction of {' '.join(q)}: {matches}"
            )
        pos, desc, described = matches[0]
        q = [*q[:pos], described, *q[pos + len(desc) :]]
        trail.append(list(q))
    raise GenerationError("reduction did not terminate")
