"""Skill library: Markdown documents with a YAML front-matter header.

The directory is the source of truth. Five built-in skills ship with the
package and are always indexed; documents in the directory with the same
name shadow them. Recurring verifier failures are counted per signature and
promoted to new skill documents once they recur inside a sliding window.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterable

import yaml

log = logging.getLogger(__name__)

BUILTIN_SKILLS = ("building-placement", "city-layout", "street-furniture", "weather-and-mood", "screenshot-tour")
SCHEMA_KEYS = ("name", "version", "tags", "dependencies", "python_util")
PROMOTION_WINDOW = 10
PROMOTION_MIN_OCCURRENCES = 2
PROMOTIONS_FILE = ".promotions.json"
FAILURES_FILE = ".failures.json"


class SkillFormatError(ValueError):
    pass


class RegistryError(ValueError):
    pass


def parse_version(v: str) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in str(v).strip().split("."))
    except ValueError:
        raise SkillFormatError(f"version must be dotted integers, got {v!r}") from None


@dataclass(frozen=True)
class SkillDoc:
    name: str
    version: str = "1.0"
    tags: tuple[str, ...] = ()
    dependencies: tuple[str, ...] = ()
    util_ref: str | None = None
    body: str = ""
    extra: tuple[tuple[str, str], ...] = ()  # unknown front-matter keys, raw "key: value" text kept verbatim
    builtin: bool = False

    @property
    def version_key(self) -> tuple[int, ...]:
        return parse_version(self.version)

    def render(self) -> str:
        lines = ["---", f"name: {self.name}", f"version: {self.version}",
                 f"tags: [{', '.join(self.tags)}]", f"dependencies: [{', '.join(self.dependencies)}]"]
        if self.util_ref:
            lines.append(f"python_util: {self.util_ref}")
        lines.extend(raw for _, raw in self.extra)
        lines.append("---")
        body = self.body if self.body.endswith("\n") or not self.body else self.body + "\n"
        return "\n".join(lines) + "\n" + body

    def section(self, title: str) -> str:
        """Text of a ``## title`` section of the body (empty if absent)."""
        m = re.search(rf"^## {re.escape(title)}\s*\n(.*?)(?=^## |\Z)", self.body, re.M | re.S)
        return m.group(1).strip() if m else ""


def _as_list(value, key: str) -> tuple[str, ...]:
    if value in (None, ""):
        return ()
    if isinstance(value, list):
        return tuple(str(v) for v in value)
    if isinstance(value, str):
        return (value,)
    raise SkillFormatError(f"{key} must be a list")


def parse_skill(text: str, builtin: bool = False) -> SkillDoc:
    lines = text.splitlines()
    if not lines or lines[0].strip() != "---":
        raise SkillFormatError("missing front-matter opening '---'")
    try:
        end = next(i for i in range(1, len(lines)) if lines[i].strip() == "---")
    except StopIteration:
        raise SkillFormatError("missing front-matter closing '---'") from None
    header = lines[1:end]
    try:
        # BaseLoader keeps scalars as strings, so "1.10" stays distinct from "1.1"
        meta = yaml.load("\n".join(header), Loader=yaml.BaseLoader) or {}
    except yaml.YAMLError as exc:
        raise SkillFormatError(f"bad front matter: {exc}") from None
    if not isinstance(meta, dict):
        raise SkillFormatError("front matter must be a mapping")
    if not meta.get("name"):
        raise SkillFormatError("front matter has no name")
    version = str(meta.get("version", "1.0"))
    parse_version(version)
    extra = []
    for raw in header:
        key = raw.split(":", 1)[0].strip()
        if raw[:1] not in (" ", "\t", "-") and ":" in raw and key not in SCHEMA_KEYS:
            extra.append((key, raw))
    body = "\n".join(lines[end + 1:])
    if text.endswith("\n") and body:
        body += "\n"
    return SkillDoc(
        name=str(meta["name"]), version=version,
        tags=_as_list(meta.get("tags"), "tags"),
        dependencies=_as_list(meta.get("dependencies"), "dependencies"),
        util_ref=meta.get("python_util") or None,
        body=body, extra=tuple(extra), builtin=builtin,
    )


def skill_filename(name: str) -> str:
    return re.sub(r"[^a-z0-9_-]+", "-", name.lower()) + ".md"


@dataclass(frozen=True)
class FailureSignature:
    category: str
    context_key: str

    @classmethod
    def of(cls, category: str, context_key: str) -> "FailureSignature":
        return cls(category.strip().lower(), " ".join(context_key.strip().lower().split()))

    @property
    def key(self) -> str:
        return f"{self.category}::{self.context_key}"


@dataclass(frozen=True)
class PromotionRecord:
    signature: FailureSignature
    skill_name: str
    episode: int

    def to_dict(self) -> dict:
        return {"category": self.signature.category, "context_key": self.signature.context_key,
                "skill_name": self.skill_name, "episode": self.episode}


def _load_builtins() -> dict[str, SkillDoc]:
    out = {}
    pkg = resources.files("navworld") / "skills_builtin"
    for name in BUILTIN_SKILLS:
        out[name] = parse_skill((pkg / f"{name}.md").read_text(encoding="utf-8"), builtin=True)
    return out


@dataclass
class SkillIndex:
    directory: Path
    docs: dict[str, SkillDoc] = field(default_factory=dict)
    diagnostics: list[str] = field(default_factory=list)
    promotions: list[PromotionRecord] = field(default_factory=list)
    failures: dict[str, list[int]] = field(default_factory=dict)
    episodes: int = 0  # generation episodes started against this registry

    def __len__(self) -> int:
        return len(self.docs)

    def __contains__(self, name: str) -> bool:
        return name in self.docs

    def get(self, name: str) -> SkillDoc:
        return self.docs[name]

    def retrieve(self, tags: Iterable[str], k: int = 3) -> list[SkillDoc]:
        if k < 1:
            raise ValueError("k must be >= 1")
        want = {t.lower() for t in tags}
        if not want:
            return []
        scored = []
        for doc in self.docs.values():
            overlap = len(want & {t.lower() for t in doc.tags})
            if overlap:
                scored.append((-overlap, doc.name, doc))
        scored.sort(key=lambda t: (t[0], t[1]))
        return [d for _, _, d in scored[:k]]

    def register(self, doc: SkillDoc, promotion_context: tuple[FailureSignature, int] | None = None) -> SkillDoc:
        prev = self.docs.get(doc.name)
        if prev is not None and doc.version_key <= prev.version_key:
            raise RegistryError(f"skill {doc.name!r} already at version {prev.version}; "
                                f"new version {doc.version} must be strictly greater")
        missing = [d for d in doc.dependencies if d not in self.docs and d != doc.name]
        if missing:
            raise RegistryError(f"skill {doc.name!r} depends on unknown skill(s) {missing}")
        self.directory.mkdir(parents=True, exist_ok=True)
        (self.directory / skill_filename(doc.name)).write_text(doc.render(), encoding="utf-8")
        self.docs[doc.name] = replace(doc, builtin=False)
        if promotion_context is not None:
            sig, episode = promotion_context
            self.promotions.append(PromotionRecord(sig, doc.name, episode))
            self._save_json(PROMOTIONS_FILE, [p.to_dict() for p in self.promotions])
        return self.docs[doc.name]

    # -- failure signatures --------------------------------------------------

    def record_failure(self, sig: FailureSignature, episode: int) -> None:
        occ = self.failures.setdefault(sig.key, [])
        if occ and episode < occ[-1]:
            raise ValueError("failure occurrences must be recorded in time order")
        occ.append(episode)
        self._save_failures()

    def next_episode(self) -> int:
        """Allocate the index of a new generation episode (persisted)."""
        ep = self.episodes
        self.episodes += 1
        self._save_failures()
        return ep

    def _save_failures(self) -> None:
        self._save_json(FAILURES_FILE, {"episodes": self.episodes, "failures": self.failures})

    def is_promoted(self, sig: FailureSignature) -> bool:
        return any(p.signature == sig for p in self.promotions)

    def should_promote(self, sig: FailureSignature, episode: int | None = None) -> bool:
        occ = self.failures.get(sig.key, [])
        if not occ or self.is_promoted(sig):
            return False
        now = occ[-1] if episode is None else episode
        recent = [e for e in occ if now - PROMOTION_WINDOW < e <= now]
        return len(recent) >= PROMOTION_MIN_OCCURRENCES

    def _save_json(self, fname: str, obj) -> None:
        self.directory.mkdir(parents=True, exist_ok=True)
        (self.directory / fname).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_registry(directory: str | Path) -> SkillIndex:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"skill directory {d} does not exist")
    docs = _load_builtins()
    index = SkillIndex(d)
    candidates = {}
    for path in sorted(d.glob("*.md")):
        try:
            doc = parse_skill(path.read_text(encoding="utf-8"))
        except (SkillFormatError, UnicodeDecodeError) as exc:
            index.diagnostics.append(f"{path.name}: {exc}")
            continue
        if doc.name in candidates:
            index.diagnostics.append(f"{path.name}: duplicate skill name {doc.name!r}, skipped")
            continue
        candidates[doc.name] = doc
    docs.update(candidates)
    # drop docs whose dependencies never resolve (iterate to a fixed point)
    changed = True
    while changed:
        changed = False
        for name in sorted(docs):
            bad = [x for x in docs[name].dependencies if x not in docs]
            if bad:
                index.diagnostics.append(f"{name}: unresolved dependencies {bad}, not indexed")
                del docs[name]
                changed = True
    index.docs = docs
    pf = d / PROMOTIONS_FILE
    if pf.exists():
        index.promotions = [PromotionRecord(FailureSignature(p["category"], p["context_key"]), p["skill_name"],
                                            int(p["episode"])) for p in json.loads(pf.read_text())]
    ff = d / FAILURES_FILE
    if ff.exists():
        saved = json.loads(ff.read_text())
        index.episodes = int(saved.get("episodes", 0))
        index.failures = {k: [int(e) for e in v] for k, v in saved.get("failures", {}).items()}
    for diag in index.diagnostics:
        log.warning("skill registry: %s", diag)
    return index


def author_skill(sig: FailureSignature, corrective_batch: list[dict], episode: int) -> SkillDoc:
    """Built-in author: a templated document naming the failure class and a corrective tool batch."""
    name = "fix-" + re.sub(r"[^a-z0-9]+", "-", f"{sig.category}-{sig.context_key}").strip("-")
    batch = json.dumps(corrective_batch, indent=1)
    body = (f"## Summary\nCorrective recipe for recurring `{sig.category}` failures on `{sig.context_key}`, "
            f"authored after episode {episode}.\n"
            f"## Usage\nSubmit the batch below through `execute_python_script` after construction, "
            f"then re-run the rule checks.\n\n```json\n{batch}\n```\n")
    tags = tuple(sorted({"evolved", sig.category, *sig.context_key.replace("::", " ").split()}))
    return SkillDoc(name=name, version="1.0", tags=tags, dependencies=(), body=body)
