"""Rule-based mining of scan descriptions into noisy phase labels.

Matching is case-insensitive substring search over the series description,
study description, and protocol fields, each rule bound to one field. Among
all matching rules the longest pattern wins; length ties fall to the class
priority Other > NC > A > V > D > Contrast, then to rule order. A scan with
no match at all labels as Other with the "<fallback>" sentinel.

Scan filters reject series that cannot be phase-classified at all: too few
slices, spacing coarser than 5 mm, post-procedure acquisitions, and
non-axial reconstructions, in that order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

SERIES = "series"
STUDY = "study"
PROTOCOL = "protocol"
_FIELDS = (SERIES, STUDY, PROTOCOL)

NO_MATCH = "<fallback>"

# priority used only to break exact length ties between classes
_CLASS_PRIORITY = {"Other": 0, "NC": 1, "A": 2, "V": 3, "D": 4, "Contrast": 5}
LABEL_CLASSES = tuple(_CLASS_PRIORITY)

RULE_FILE_HEADER = "phase-rules/1"


@dataclass(frozen=True)
class Rule:
    label: str
    field: str
    pattern: str


@dataclass(frozen=True)
class MinedLabel:
    label: str
    matched_pattern: str
    matched_field: str


@dataclass
class ScanMeta:
    study_uid: str
    series_uid: str
    patient_id: str
    study_description: str = ""
    series_description: str = ""
    protocol: str = ""
    slice_count: int = 0
    slice_spacing_mm: float = 1.0
    axial: bool = True
    post_procedure: bool = False

    def __post_init__(self):
        if not self.study_uid or not self.series_uid:
            raise ValueError("study_uid and series_uid must be non-empty")
        if self.slice_count < 0:
            raise ValueError(f"slice_count must be >= 0, got {self.slice_count}")
        if not self.slice_spacing_mm > 0:
            raise ValueError(f"slice_spacing_mm must be > 0, got {self.slice_spacing_mm}")

    def field_text(self, field: str) -> str:
        if field == SERIES:
            return self.series_description
        if field == STUDY:
            return self.study_description
        return self.protocol


def _rules(label: str, patterns: Iterable[str], field: str = SERIES) -> list[Rule]:
    return [Rule(label, field, p) for p in patterns]


def default_rules() -> list[Rule]:
    """The built-in rule table.

    Most rules scan the series description. "CTAP" also scans the protocol
    and the guide/biopsy markers also scan the study description, since
    those tags are shared across a study's series.
    """
    rules: list[Rule] = []
    rules += _rules(
        "A",
        [
            "arterial",
            "liver A",
            "Liver -A",
            "Artery",
            "HAP",
            "Liver 3P A",
            "Liver 3P C+ A",
            "A Phase",
            "A-Phase",
            "Liver 3P C-+ A.",
            "CTA",
            "Liver 4P A",
            "30s",
        ],
    )
    rules += _rules(
        "V",
        [
            "venous",
            "Liver 3P V",
            "Liver 3P C+ V",
            "Liver 3P +H",
            "LIVER H",
            "Liver -V",
            "Liver V",
            "Portal",
            "Liver P.",
            "Vena",
            "PVP",
            "Phase H.",
            "H./Phase",
            "V phase",
            "phase V",
            "V-phase",
            "Liver 3P C-+ V.",
            "CTV",
            "Liver 4P V",
            "70s",
        ],
    )
    rules += _rules(
        "D",
        [
            "Liver 3P D",
            "Liver D.",
            "Liver -D",
            "delay",
            "Liver 3P C-+ D.",
            "Liver 3P C+ D",
            "D-phase",
            "Liver 4P D",
            "DP",
            "180s",
            "EQP",
        ],
    )
    rules += _rules(
        "NC",
        [
            "C-",
            "PRECONTRAST",
            "Abd-pelvis without contrast",
            "Non:Contrast",
            "Non Contrast",
            "Non-Contrast",
            "NoC",
        ],
    )
    rules += _rules(
        "Contrast",
        [
            "ABD C+",
            "A C+",
            "abdomen C+",
            "AbdPel C",
            "Body C+",
            "with contrast",
            "POSTCONTRAST",
        ],
    )
    rules += _rules("Other", ["CTAP"], field=PROTOCOL)
    rules += _rules("Other", ["CTAP"])
    for marker in ("guide", "BX", "POST"):
        rules.append(Rule("Other", STUDY, marker))
        rules.append(Rule("Other", SERIES, marker))
    rules += _rules("Other", ["Topo", "scano", "scout", "surview"])
    rules += _rules("Other", ["MIP"])
    rules += _rules("Other", ["volume"])
    rules += _rules("Other", ["monitor"])
    rules += _rules("Other", ["cor"])
    rules += _rules("Other", ["obl"])
    rules += _rules("Other", ["reformatted"])
    rules += _rules("Other", ["brain"])
    rules += _rules("Other", ["lung", "CXR", "chest"])
    rules += _rules("Other", ["pelvic", "Pelvis"])
    rules += _rules("Other", ["3 Phase Liver", "120CC/3CC/SEC", "4cc sec", "Tri-Phase Liver"])
    return rules


def validate_rules(rules: list[Rule]) -> None:
    seen = set()
    for rule in rules:
        if rule.label not in _CLASS_PRIORITY:
            raise ValueError(f"unknown rule class {rule.label!r}")
        if rule.field not in _FIELDS:
            raise ValueError(f"unknown rule field {rule.field!r}")
        if not rule.pattern:
            raise ValueError("rule patterns must be non-empty")
        key = (rule.label, rule.pattern, rule.field)
        if key in seen:
            raise ValueError(f"duplicate rule {key}")
        seen.add(key)


def load_rules(path: str | Path) -> list[Rule]:
    """Rule file: header line, then one `class<TAB>field<TAB>pattern` per line."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    body = [ln for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]
    if not body or body[0].strip() != RULE_FILE_HEADER:
        raise ValueError(f"rule file must start with {RULE_FILE_HEADER!r}")
    rules = []
    for ln in body[1:]:
        parts = ln.split("\t")
        if len(parts) != 3:
            raise ValueError(f"malformed rule line: {ln!r}")
        rules.append(Rule(parts[0].strip(), parts[1].strip(), parts[2]))
    validate_rules(rules)
    return rules


def dump_rules(rules: list[Rule], path: str | Path) -> None:
    lines = [RULE_FILE_HEADER]
    lines += [f"{r.label}\t{r.field}\t{r.pattern}" for r in rules]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def mine_label(meta: ScanMeta, rules: list[Rule] | None = None) -> MinedLabel:
    """Best-matching rule for one scan; total over all inputs."""
    if rules is None:
        rules = default_rules()
    texts = {field: meta.field_text(field).lower() for field in _FIELDS}
    best = None
    best_key = None
    for order, rule in enumerate(rules):
        if rule.pattern.lower() in texts[rule.field]:
            key = (-len(rule.pattern), _CLASS_PRIORITY[rule.label], order)
            if best_key is None or key < best_key:
                best_key = key
                best = rule
    if best is None:
        return MinedLabel("Other", NO_MATCH, SERIES)
    return MinedLabel(best.label, best.pattern, best.field)


DROP_SLICE_COUNT = "slice_count"
DROP_SPACING = "slice_spacing"
DROP_POST_PROCEDURE = "post_procedure"
DROP_NOT_AXIAL = "not_axial"


def filter_scan(meta: ScanMeta) -> str | None:
    """Drop reason, or None to keep. Checks run in a fixed order."""
    if meta.slice_count < 10:
        return DROP_SLICE_COUNT
    if meta.slice_spacing_mm > 5.0:
        return DROP_SPACING
    if meta.post_procedure:
        return DROP_POST_PROCEDURE
    if not meta.axial:
        return DROP_NOT_AXIAL
    return None


_META_FIELDS = {
    "study_uid": str,
    "series_uid": str,
    "patient_id": str,
    "study_description": str,
    "series_description": str,
    "protocol": str,
    "slice_count": int,
    "slice_spacing_mm": float,
    "axial": bool,
    "post_procedure": bool,
}


def meta_from_record(record: dict) -> ScanMeta:
    kwargs = {}
    for name, cast in _META_FIELDS.items():
        if name not in record:
            raise ValueError(f"manifest record missing field {name!r}")
        value = record[name]
        if cast is bool and not isinstance(value, bool):
            raise ValueError(f"field {name!r} must be boolean, got {value!r}")
        kwargs[name] = cast(value)
    return ScanMeta(**kwargs)


@dataclass
class MineResult:
    kept: list[dict]
    rejected: list[dict]
    errors: list[dict]
    counts: dict[str, int]


def mine_manifest(lines: Iterable[str], rules: list[Rule] | None = None) -> MineResult:
    """Label every kept scan in a JSON-lines manifest.

    Malformed lines become error records and processing continues. Dropped
    scans go to the reject list with their reason. Counts tally kept scans
    per mined class.
    """
    if rules is None:
        rules = default_rules()
    validate_rules(rules)
    kept: list[dict] = []
    rejected: list[dict] = []
    errors: list[dict] = []
    counts = {label: 0 for label in LABEL_CLASSES}
    for lineno, line in enumerate(lines, start=1):
        text = line.strip()
        if not text:
            continue
        try:
            record = json.loads(text)
            if not isinstance(record, dict):
                raise ValueError("manifest line is not a JSON object")
            if record.get("schema"):
                continue
            meta = meta_from_record(record)
        except ValueError as exc:
            errors.append({"line": lineno, "error": str(exc)})
            continue
        reason = filter_scan(meta)
        if reason is not None:
            rejected.append({"line": lineno, "series_uid": meta.series_uid, "reason": reason})
            continue
        label = mine_label(meta, rules)
        out = dict(record)
        out["mined_label"] = {
            "class": label.label,
            "matched_pattern": label.matched_pattern,
            "matched_field": label.matched_field,
        }
        kept.append(out)
        counts[label.label] += 1
    return MineResult(kept=kept, rejected=rejected, errors=errors, counts=counts)
