"""Adapters turning the two supported raw dataset layouts into canonical
JSONL files.

Amazon product reviews: one directory per category holding
``positive.review`` / ``negative.review`` / ``unlabeled.review`` files of
loose SGML-ish ``<review>`` blocks. Polarity maps to label 1/0; unlabelled
reviews are kept as unlabelled lines.

PHEME rumour threads: one directory per event holding ``rumours`` and
``non-rumours`` thread directories, each with a ``source-tweets/<id>.json``
tweet. Rumour maps to label 1, non-rumour to 0; unreadable tweet files are
skipped and counted.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from .data import Example, write_jsonl


class AdapterError(ValueError):
    """Unrecognized raw dataset layout."""


@dataclass
class IngestSummary:
    domains: dict[str, dict[str, int]] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    skipped: int = 0

    def describe(self) -> str:
        lines = []
        for domain in sorted(self.domains):
            counts = self.domains[domain]
            lines.append(
                f"{domain}: {counts['labelled']} labelled"
                f" ({counts['positive']} positive, {counts['negative']} negative),"
                f" {counts['unlabelled']} unlabelled"
            )
        if self.skipped:
            lines.append(f"skipped {self.skipped} unreadable records")
        lines.extend(f"warning: {w}" for w in self.warnings)
        return "\n".join(lines)


_REVIEW_FILES = {
    "positive.review": 1,
    "negative.review": 0,
    "unlabeled.review": None,
    "unlabelled.review": None,
}

_TAG_RE = re.compile(r"<(/?)([a-z_]+)>")


def _iter_review_fields(path: Path):
    """Yield {tag: text} dicts for each <review> block in a pseudo-SGML file.

    The legacy files are not valid XML (unescaped ampersands, stray
    brackets), so this scans line-oriented open/close tags instead.
    """
    text = path.read_bytes().decode("utf-8", errors="replace")
    fields: dict[str, str] = {}
    current: str | None = None
    buffer: list[str] = []
    in_review = False
    for line in text.splitlines():
        stripped = line.strip()
        m = _TAG_RE.fullmatch(stripped)
        if m:
            closing, tag = m.group(1) == "/", m.group(2)
            if tag == "review":
                if closing and in_review:
                    yield fields
                    fields = {}
                in_review = not closing
                current = None
            elif in_review:
                if closing:
                    if current == tag:
                        fields[tag] = " ".join(" ".join(buffer).split())
                        current = None
                else:
                    current = tag
                    buffer = []
        elif current is not None:
            buffer.append(stripped)


def adapt_amazon(raw_root: str | Path, out_dir: str | Path) -> IngestSummary:
    """Convert per-category review files into one canonical file per category."""
    root = Path(raw_root)
    if not root.is_dir():
        raise AdapterError(f"not a directory: {root}")
    categories = sorted(
        p for p in root.iterdir() if p.is_dir() and any((p / f).is_file() for f in _REVIEW_FILES)
    )
    if not categories:
        raise AdapterError(
            f"unknown layout: no category directories with *.review files under {root}"
        )
    summary = IngestSummary()
    out = Path(out_dir)
    for category_dir in categories:
        domain = category_dir.name
        examples: list[Example] = []
        counts = {"labelled": 0, "positive": 0, "negative": 0, "unlabelled": 0}
        seen_ids: set[str] = set()
        for filename, label in _REVIEW_FILES.items():
            path = category_dir / filename
            if not path.is_file():
                continue
            for i, fields in enumerate(_iter_review_fields(path)):
                text = fields.get("review_text", "")
                if not text.strip():
                    summary.skipped += 1
                    continue
                base = fields.get("unique_id") or f"{filename}-{i}"
                ex_id = f"{domain}/{base}"
                n = 1
                while ex_id in seen_ids:
                    n += 1
                    ex_id = f"{domain}/{base}#{n}"
                seen_ids.add(ex_id)
                examples.append(Example(id=ex_id, text=text, domain=domain, label=label))
                if label is None:
                    counts["unlabelled"] += 1
                else:
                    counts["labelled"] += 1
                    counts["positive" if label == 1 else "negative"] += 1
        if counts["labelled"] == 0:
            summary.warnings.append(f"category {domain!r} has no labelled reviews")
        write_jsonl(out / f"{domain}.jsonl", examples)
        summary.domains[domain] = counts
    return summary


_PHEME_SUFFIX = "-all-rnr-threads"
_PHEME_ANNOTATIONS = {"rumours": 1, "non-rumours": 0}


def _pheme_event_dirs(root: Path) -> list[Path]:
    def is_event(p: Path) -> bool:
        return p.is_dir() and any((p / ann).is_dir() for ann in _PHEME_ANNOTATIONS)

    if is_event(root):
        return [root]
    events = sorted(p for p in root.iterdir() if is_event(p))
    if not events:
        nested = root / "all-rnr-annotated-threads"
        if nested.is_dir():
            return _pheme_event_dirs(nested)
    return events


def adapt_pheme(raw_root: str | Path, out_dir: str | Path) -> IngestSummary:
    """Convert per-event rumour/non-rumour threads into canonical files."""
    root = Path(raw_root)
    if not root.is_dir():
        raise AdapterError(f"not a directory: {root}")
    events = _pheme_event_dirs(root)
    if not events:
        raise AdapterError(f"unknown layout: no event directories with rumour annotations under {root}")
    summary = IngestSummary()
    out = Path(out_dir)
    for event_dir in events:
        domain = event_dir.name.removesuffix(_PHEME_SUFFIX)
        examples: list[Example] = []
        counts = {"labelled": 0, "positive": 0, "negative": 0, "unlabelled": 0}
        seen_ids: set[str] = set()
        for annotation in sorted(_PHEME_ANNOTATIONS):
            label = _PHEME_ANNOTATIONS[annotation]
            ann_dir = event_dir / annotation
            if not ann_dir.is_dir():
                summary.warnings.append(f"event {domain!r} is missing the {annotation!r} directory")
                continue
            for thread_dir in sorted(p for p in ann_dir.iterdir() if p.is_dir()):
                tweet = _read_source_tweet(thread_dir)
                if tweet is None:
                    summary.skipped += 1
                    continue
                tweet_id, text = tweet
                ex_id = f"{domain}/{tweet_id}"
                if ex_id in seen_ids or not text.strip():
                    summary.skipped += 1
                    continue
                seen_ids.add(ex_id)
                examples.append(Example(id=ex_id, text=text, domain=domain, label=label))
                counts["labelled"] += 1
                counts["positive" if label == 1 else "negative"] += 1
        write_jsonl(out / f"{domain}.jsonl", examples)
        summary.domains[domain] = counts
    return summary


def _read_source_tweet(thread_dir: Path) -> tuple[str, str] | None:
    for subdir in ("source-tweets", "source-tweet"):
        tweets = sorted((thread_dir / subdir).glob("*.json")) if (thread_dir / subdir).is_dir() else []
        for path in tweets:
            try:
                obj = json.loads(path.read_text(encoding="utf-8", errors="replace"))
            except (OSError, json.JSONDecodeError):
                continue
            text = obj.get("text") or obj.get("full_text") or ""
            tweet_id = str(obj.get("id_str") or obj.get("id") or path.stem)
            if text:
                return tweet_id, text
    return None
