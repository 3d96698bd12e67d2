"""Multi-domain text corpora: canonical JSONL IO, validation, and split views.

A canonical dataset directory holds one JSONL file per domain. Every line is
an object with keys ``id``, ``text`` and ``domain`` plus, for labelled
examples, a binary ``label``; unlabelled lines omit the key entirely.
Target splits of a leave-one-out view are derived in memory via
:func:`holdout`; when a bundle that carries target splits is written back to
disk they land in a reserved ``_target/`` subdirectory so the main directory
stays one-file-per-domain.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .seeding import stable_rng

_SCHEMA_KEYS = {"id", "text", "label", "domain"}
_TARGET_DIR = "_target"
_TARGET_UNLABELLED = "unlabelled.jsonl"
_TARGET_TEST = "test.jsonl"


class DataError(ValueError):
    """Base class for dataset loading and validation failures."""


class ParseError(DataError):
    """A line could not be parsed against the canonical schema."""


class ValidationError(DataError):
    """Structurally valid input that violates a bundle invariant."""


@dataclass(frozen=True)
class Example:
    """One text with an optional binary label and its domain of origin."""

    id: str
    text: str
    domain: str
    label: int | None = None

    def __post_init__(self):
        if not self.id:
            raise ValidationError("example id must be non-empty")
        if not self.domain:
            raise ValidationError(f"example {self.id!r}: domain must be non-empty")
        if not self.text.strip():
            raise ValidationError(f"example {self.id!r}: text is empty after trim")
        if self.label is not None and self.label not in (0, 1):
            raise ValidationError(f"example {self.id!r}: label must be 0 or 1, got {self.label!r}")

    def without_label(self) -> "Example":
        return dataclasses.replace(self, label=None)


def _check_unique_ids(examples: Iterable[Example], context: str, seen: set[str]) -> None:
    for ex in examples:
        if ex.id in seen:
            raise ValidationError(f"duplicate example id {ex.id!r} in {context}")
        seen.add(ex.id)


@dataclass(frozen=True)
class DatasetBundle:
    """Labelled source corpora plus (optionally) a transductive target split.

    ``sources`` maps domain name to labelled examples. ``target_unlabelled``
    is the unlabelled pool the adversarial objective may consume;
    ``target_test`` is held-out labelled data used only for scoring.
    ``unlabelled_pools`` keeps per-domain unlabelled lines found in canonical
    files (e.g. extra unlabelled product reviews); training does not read
    them, the transductive target pool comes from :func:`holdout`.
    """

    sources: dict[str, tuple[Example, ...]]
    target_unlabelled: tuple[Example, ...] = ()
    target_test: tuple[Example, ...] = ()
    unlabelled_pools: dict[str, tuple[Example, ...]] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "sources", {d: tuple(exs) for d, exs in self.sources.items()})
        object.__setattr__(self, "target_unlabelled", tuple(self.target_unlabelled))
        object.__setattr__(self, "target_test", tuple(self.target_test))
        object.__setattr__(
            self, "unlabelled_pools", {d: tuple(exs) for d, exs in self.unlabelled_pools.items()}
        )
        if not self.sources:
            raise ValidationError("bundle has no source domains")
        for domain, examples in self.sources.items():
            if not domain:
                raise ValidationError("empty domain name")
            for ex in examples:
                if ex.domain != domain:
                    raise ValidationError(
                        f"example {ex.id!r} has domain {ex.domain!r} but is filed under {domain!r}"
                    )
                if ex.label is None:
                    raise ValidationError(f"source example {ex.id!r} is unlabelled")
        for ex in self.target_unlabelled:
            if ex.label is not None:
                raise ValidationError(f"target_unlabelled example {ex.id!r} carries a label")
        # Ids must be unique; the one sanctioned overlap is the transductive
        # target pool, which holds the very same examples as target_test with
        # labels stripped.
        seen: set[str] = set()
        for domain in sorted(self.sources):
            _check_unique_ids(self.sources[domain], f"sources[{domain}]", seen)
        for domain in sorted(self.unlabelled_pools):
            _check_unique_ids(self.unlabelled_pools[domain], f"unlabelled_pools[{domain}]", seen)
        test_ids: set[str] = set(seen)
        _check_unique_ids(self.target_test, "target_test", test_ids)
        pool_ids: set[str] = set(seen)
        _check_unique_ids(self.target_unlabelled, "target_unlabelled", pool_ids)

    @property
    def domains(self) -> tuple[str, ...]:
        """Source domain names in lexicographic order."""
        return tuple(sorted(self.sources))

    def domain_index(self) -> dict[str, int]:
        """Expert index per domain: rank in lexicographic name order."""
        return {d: i for i, d in enumerate(self.domains)}

    @property
    def num_sources(self) -> int:
        return len(self.sources)

    def training_view(self) -> "DatasetBundle":
        """The bundle as handed to training code: no held-out labels at all.

        Built without ever touching ``target_test``, so an audit can verify
        the training path structurally cannot read held-out labels.
        """
        return DatasetBundle(
            sources=self.sources,
            target_unlabelled=self.target_unlabelled,
            target_test=(),
            unlabelled_pools=self.unlabelled_pools,
        )

    def counts(self) -> dict[str, int]:
        c = {d: len(exs) for d, exs in sorted(self.sources.items())}
        c["<target_unlabelled>"] = len(self.target_unlabelled)
        c["<target_test>"] = len(self.target_test)
        return c


def _example_to_obj(ex: Example) -> dict:
    obj = {"id": ex.id, "text": ex.text}
    if ex.label is not None:
        obj["label"] = ex.label
    obj["domain"] = ex.domain
    return obj


def _example_from_obj(obj: dict, where: str) -> Example:
    if not isinstance(obj, dict):
        raise ParseError(f"{where}: line is not a JSON object")
    unknown = set(obj) - _SCHEMA_KEYS
    if unknown:
        raise ParseError(f"{where}: unknown keys {sorted(unknown)}")
    for key in ("id", "text", "domain"):
        if key not in obj:
            raise ParseError(f"{where}: missing required key {key!r}")
        if not isinstance(obj[key], str):
            raise ParseError(f"{where}: key {key!r} must be a string")
    label = obj.get("label")
    if label is not None and (isinstance(label, bool) or label not in (0, 1)):
        raise ParseError(f"{where}: label must be 0 or 1, got {label!r}")
    try:
        return Example(id=obj["id"], text=obj["text"], domain=obj["domain"], label=label)
    except ValidationError as err:
        raise ParseError(f"{where}: {err}") from err


def _read_jsonl(path: Path) -> list[Example]:
    examples = []
    with path.open("r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                raise ParseError(f"{where}: invalid JSON: {err.msg}") from err
            examples.append(_example_from_obj(obj, where))
    return examples


def atomic_write_text(path: Path, text: str) -> None:
    """Write-temp-then-rename so readers never observe partial files."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def write_jsonl(path: Path, examples: Iterable[Example]) -> None:
    lines = [json.dumps(_example_to_obj(ex), ensure_ascii=False) for ex in examples]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def load_canonical(path: str | Path) -> DatasetBundle:
    """Load a canonical dataset directory into a validated bundle.

    One JSONL file per domain; labelled lines become source examples,
    unlabelled ones go to ``unlabelled_pools``. Deterministic example order
    (file order). Raises :class:`ParseError` with file and line on malformed
    input and :class:`ValidationError` on duplicate ids or fewer than two
    labelled source domains.
    """
    root = Path(path)
    if not root.is_dir():
        raise ValidationError(f"not a dataset directory: {root}")
    files = sorted(p for p in root.glob("*.jsonl") if p.is_file())
    if not files:
        raise ValidationError(f"no domain files (*.jsonl) found in {root}")
    sources: dict[str, list[Example]] = {}
    pools: dict[str, list[Example]] = {}
    for file in files:
        domain = file.stem
        for ex in _read_jsonl(file):
            if ex.domain != domain:
                raise ValidationError(
                    f"{file}: example {ex.id!r} has domain {ex.domain!r}, expected {domain!r}"
                )
            (sources if ex.label is not None else pools).setdefault(domain, []).append(ex)
    target_unlabelled: list[Example] = []
    target_test: list[Example] = []
    tdir = root / _TARGET_DIR
    if tdir.is_dir():
        upath = tdir / _TARGET_UNLABELLED
        tpath = tdir / _TARGET_TEST
        if upath.is_file():
            target_unlabelled = _read_jsonl(upath)
        if tpath.is_file():
            target_test = _read_jsonl(tpath)
    if len(sources) < 2:
        raise ValidationError(
            f"need at least 2 labelled source domains, found {len(sources)} in {root}"
        )
    return DatasetBundle(
        sources={d: tuple(exs) for d, exs in sources.items()},
        target_unlabelled=tuple(target_unlabelled),
        target_test=tuple(target_test),
        unlabelled_pools={d: tuple(exs) for d, exs in pools.items()},
    )


def write_canonical(bundle: DatasetBundle, path: str | Path) -> None:
    """Write a bundle back to a canonical directory (atomic per file)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    domains = sorted(set(bundle.sources) | set(bundle.unlabelled_pools))
    for domain in domains:
        labelled = bundle.sources.get(domain, ())
        pool = bundle.unlabelled_pools.get(domain, ())
        write_jsonl(root / f"{domain}.jsonl", list(labelled) + list(pool))
    if bundle.target_unlabelled or bundle.target_test:
        tdir = root / _TARGET_DIR
        write_jsonl(tdir / _TARGET_UNLABELLED, bundle.target_unlabelled)
        write_jsonl(tdir / _TARGET_TEST, bundle.target_test)


def holdout(bundle: DatasetBundle, domain: str) -> DatasetBundle:
    """Leave-one-out view: ``domain`` becomes the transductive target.

    Its labelled examples are stripped of labels to form the unlabelled
    target pool and kept (with labels) as the evaluation-only test split.
    """
    if domain not in bundle.sources:
        raise ValidationError(f"unknown domain {domain!r}; have {sorted(bundle.sources)}")
    held = bundle.sources[domain]
    sources = {d: exs for d, exs in bundle.sources.items() if d != domain}
    if not sources:
        raise ValidationError("cannot hold out the only source domain")
    pools = {d: exs for d, exs in bundle.unlabelled_pools.items() if d != domain}
    return DatasetBundle(
        sources=sources,
        target_unlabelled=tuple(ex.without_label() for ex in held),
        target_test=held,
        unlabelled_pools=pools,
    )


def train_val_split(
    bundle: DatasetBundle, fraction: float = 0.1, seed: int = 0
) -> tuple[DatasetBundle, tuple[Example, ...]]:
    """Split off a per-domain, label-stratified validation set.

    Returns the reduced training bundle and the validation examples in a
    deterministic order (sorted domains, label 0 group before label 1,
    seeded shuffle within each group).
    """
    if not 0.0 < fraction < 1.0:
        raise ValidationError(f"fraction must be in (0, 1), got {fraction}")
    train_sources: dict[str, tuple[Example, ...]] = {}
    val: list[Example] = []
    for domain in sorted(bundle.sources):
        kept: list[Example] = []
        for label in (0, 1):
            group = [ex for ex in bundle.sources[domain] if ex.label == label]
            stable_rng("val-split", seed, domain, label).shuffle(group)
            n_val = int(len(group) * fraction)
            if n_val == 0 and len(group) >= 2:
                n_val = 1
            val.extend(group[:n_val])
            kept.extend(group[n_val:])
        kept.sort(key=lambda ex: ex.id)
        if not kept:
            raise ValidationError(f"validation split would empty domain {domain!r}")
        train_sources[domain] = tuple(kept)
    return (
        dataclasses.replace(bundle, sources=train_sources),
        tuple(val),
    )
