"""Deterministic generators for the bundled toy corpus and multiple-choice tasks.

The corpus is templated English-like prose over a small lexicon (content
words, function words, numbers, punctuation, interjections) so every token
category shows up. Tasks attach one object to a (name, relation) context and
draw three distractors from the same pool; gold positions cycle 0..3 so the
label distribution is exactly balanced.
"""
from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np

from .data import MCTask, load_tasks

NOUNS = ("cat dog bird fish horse cow sheep goat mouse rabbit fox wolf bear lion tiger "
         "tree river hill stone house road garden forest field lake boat cart bell lamp "
         "book letter table chair window door basket coat hat shoe cup bowl bread apple "
         "cheese milk honey seed flower leaf cloud storm star moon sun king queen child "
         "farmer baker teacher sailor doctor").split()
ADJECTIVES = ("old young small large quiet loud bright dark warm cold happy sad quick slow "
              "green red blue brown white black gentle wild tired busy clever kind tall short "
              "soft hard").split()
VERBS = ("saw found carried watched followed helped painted moved pushed pulled opened "
         "closed washed cooked built fixed visited called heard chased dropped lifted "
         "touched counted dreamed").split()
INTRANSITIVE = "slept ran sang waited laughed rested danced walked smiled wandered".split()
PREPS = "near under behind beside above across through into from with".split()
NAMES = ("anna ben clara david emma felix grace henry iris jack kate leo mia noah olga paul "
         "quinn rosa sam tara umar vera will xena yuri zoe adam bella carl dora eric fiona "
         "george hana ivan julia karl lena marco nina oscar petra rudi sara tom ulla victor "
         "wanda yara zack alba bruno cora dean elsa frank gina hugo").split()
RELATIONS = ("keeps a pet", "grows a plant called", "plays the", "drinks", "reads about",
             "paints a", "travels by", "collects")
OBJECTS = ("tulip", "violin", "tea", "comets", "boat", "stamps", "lizard", "cactus", "drum",
           "juice", "castles", "train")
INTERJ = ("oh", "wow", "hey", "alas", "hmm")


def _sentence(rng: np.random.Generator) -> str:
    def pick(seq):
        return seq[int(rng.integers(len(seq)))]

    kind = int(rng.integers(8))
    if kind == 0:
        return f"the {pick(ADJECTIVES)} {pick(NOUNS)} {pick(VERBS)} the {pick(NOUNS)} {pick(PREPS)} the {pick(NOUNS)}."
    if kind == 1:
        return f"{pick(NAMES)} and {pick(NAMES)} {pick(INTRANSITIVE)} {pick(PREPS)} the {pick(ADJECTIVES)} {pick(NOUNS)}."
    if kind == 2:
        return f"there were {int(rng.integers(2, 100))} {pick(NOUNS)}s in the {pick(NOUNS)}, and {int(rng.integers(1, 10))} of them {pick(INTRANSITIVE)}."
    if kind == 3:
        return f"{pick(INTERJ)}, the {pick(NOUNS)} is {pick(ADJECTIVES)} today!"
    if kind == 4:
        return f"did {pick(NAMES)} see the {pick(ADJECTIVES)} {pick(NOUNS)}? yes, {pick(NAMES)} did."
    if kind == 5:
        return f"{pick(NAMES)} {pick(RELATIONS)} {pick(OBJECTS)}."
    if kind == 6:
        return f"when the {pick(NOUNS)} {pick(INTRANSITIVE)}, the {pick(ADJECTIVES)} {pick(NOUNS)} {pick(VERBS)} it; then it {pick(INTRANSITIVE)}."
    return f"in {int(rng.integers(1900, 2030))} a {pick(ADJECTIVES)} {pick(NOUNS)} {pick(VERBS)} {pick(NAMES)} {pick(PREPS)} the {pick(NOUNS)}."


def make_corpus(n_bytes: int = 1_000_000, seed: int = 0) -> str:
    rng = np.random.Generator(np.random.Philox(seed))
    parts: list[str] = []
    size = 0
    line: list[str] = []
    while size < n_bytes:
        s = _sentence(rng)
        line.append(s)
        size += len(s) + 1
        if len(line) >= 4:
            parts.append(" ".join(line))
            line = []
    if line:
        parts.append(" ".join(line))
    return "\n".join(parts) + "\n"


def make_tasks(n: int = 400, seed: int = 0, n_choices: int = 4, name: str = "toy") -> list[MCTask]:
    """Balanced ``n_choices``-way tasks with unique contexts."""
    rng = np.random.Generator(np.random.Philox(seed + 1))
    contexts = [(p, r) for p in NAMES for r in RELATIONS]
    if n > len(contexts):
        raise ValueError(f"at most {len(contexts)} unique tasks")
    order = rng.permutation(len(contexts))[:n]
    tasks = []
    for k, ci in enumerate(order):
        person, rel = contexts[int(ci)]
        picks = rng.choice(len(OBJECTS), size=n_choices, replace=False)
        gold = k % n_choices
        conts = [f" {OBJECTS[int(j)]}." for j in picks]
        tasks.append(MCTask(sys_prompt="", context=f"{person} {rel}", continuations=conts,
                            gold=gold, task=name))
    return tasks


def resource_path(name: str) -> Path:
    return Path(str(resources.files("intglab").joinpath("resources", name)))


def bundled_corpus() -> str:
    return resource_path("corpus.txt").read_text(encoding="utf-8")


def bundled_tasks() -> list[MCTask]:
    return load_tasks(resource_path("tasks.jsonl"))


if __name__ == "__main__":
    from .data import save_tasks

    resource_path("corpus.txt").write_text(make_corpus(), encoding="utf-8")
    save_tasks(make_tasks(), resource_path("tasks.jsonl"))
