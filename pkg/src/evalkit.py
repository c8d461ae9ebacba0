"""
Evaluation protocol: label extraction with Error marking, accuracy, text
metrics (Rouge-1/L, BLEU, a lexicon-driven METEOR) and the output formats
used for supervision and parsing.
"""
import json
import logging
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import pandas as pd
import tomli
from nltk.translate.bleu_score import brevity_penalty
from nltk.util import ngrams
from rouge_score import rouge_scorer

from src.data import DESCRIPTIONS_PATH, LEXICON_PATH
from src.errors import ConfigError, MetricUndefinedError, ParameterError

ERROR = "Error"
BLEU_MAX_ORDER = 4

logger = logging.getLogger(__name__)


### Lexicon


@dataclass(frozen=True)
class LabelEntry:
    canonical: str
    forms: tuple[str, ...]
    synonyms: tuple[str, ...]
    adjective: str


class LabelLexicon:
    def __init__(self, entries: Sequence[LabelEntry]):
        if not entries:
            raise ConfigError("label lexicon is empty")
        self.entries = {e.canonical: e for e in entries}
        self._forms: dict[str, str] = {}
        self._synonyms: dict[str, str] = {}
        for entry in entries:
            words = [(w.lower(), self._forms) for w in (entry.canonical, *entry.forms)]
            words += [(w.lower(), self._synonyms) for w in entry.synonyms]
            for word, table in words:
                owner = self._forms.get(word) or self._synonyms.get(word)
                if owner is not None and owner != entry.canonical:
                    raise ConfigError(f"lexicon word {word!r} is shared by {owner} and {entry.canonical}")
                table[word] = entry.canonical
        alternatives = sorted({*self._forms, *self._synonyms}, key=lambda w: (-len(w), w))
        self._pattern = re.compile(r"\b(" + "|".join(re.escape(w) for w in alternatives) + r")\b", re.IGNORECASE)

    @property
    def labels(self) -> list[str]:
        return list(self.entries)

    def canonical(self, word: str) -> str | None:
        word = word.lower()
        return self._forms.get(word) or self._synonyms.get(word)

    def form_label(self, word: str) -> str | None:
        return self._forms.get(word.lower())

    def require(self, label: str) -> str:
        canonical = self.canonical(label)
        if canonical is None:
            raise ParameterError(f"label {label!r} is not in the lexicon")
        return canonical

    def adjective(self, label: str) -> str:
        return self.entries[self.require(label)].adjective

    def matches(self, text: str) -> list[str]:
        return [self.canonical(m.group(0)) or "" for m in self._pattern.finditer(text)]


def load_lexicon(path: Path | None = None) -> LabelLexicon:
    path = Path(path) if path is not None else LEXICON_PATH
    try:
        with open(path, "rb") as f:
            raw = tomli.load(f)
    except (OSError, tomli.TOMLDecodeError) as e:
        raise ConfigError(f"cannot read lexicon {path}: {e}") from e
    entries = []
    for canonical, body in raw.get("labels", {}).items():
        unknown = set(body) - {"forms", "synonyms", "adjective"}
        if unknown:
            raise ConfigError(f"lexicon {path}: unknown keys {sorted(unknown)} under labels.{canonical}")
        forms = tuple(body.get("forms", ()))
        entries.append(LabelEntry(canonical, forms, tuple(body.get("synonyms", ())), body.get("adjective", canonical.lower())))
    return LabelLexicon(entries)


def load_descriptions(path: Path | None = None) -> dict[str, list[str]]:
    path = Path(path) if path is not None else DESCRIPTIONS_PATH
    try:
        with open(path, "rb") as f:
            raw = tomli.load(f)
    except (OSError, tomli.TOMLDecodeError) as e:
        raise ConfigError(f"cannot read description corpus {path}: {e}") from e
    return {label: list(texts) for label, texts in raw.get("descriptions", {}).items()}


def extract_label(text: str, lexicon: LabelLexicon) -> str:
    """The single canonical label mentioned in `text`, or Error."""
    found = set(lexicon.matches(text))
    return found.pop() if len(found) == 1 else ERROR


### Records and accuracy


@dataclass
class GenerationRecord:
    sample_id: str
    kind: str
    text: str
    extracted: str
    reference_label: str
    dataset_id: str = ""
    reference_text: str | None = None
    scores: dict[str, float] = field(default_factory=dict)
    error: str | None = None

    @property
    def correct(self) -> bool:
        return self.extracted != ERROR and self.extracted == self.reference_label


def accuracy(records: Sequence[GenerationRecord]) -> float:
    if not records:
        raise ParameterError("accuracy over an empty record set")
    return sum(r.correct for r in records) / len(records)


### Text metrics


def tokenize_words(text: str) -> list[str]:
    return re.findall(r"\w+", text.lower())


_ROUGE = rouge_scorer.RougeScorer(["rouge1", "rougeL"], use_stemmer=False)


def rouge(candidate: str, reference: str) -> dict[str, float]:
    if not tokenize_words(reference):
        raise MetricUndefinedError("Rouge is undefined for an empty reference")
    scores = _ROUGE.score(reference, candidate)
    return {"rouge1_f": scores["rouge1"].fmeasure, "rougeL_f": scores["rougeL"].fmeasure}


def bleu(candidate: str, reference: str, max_n: int = BLEU_MAX_ORDER) -> float:
    """
    Geometric mean of clipped n-gram precisions for n = 1..max_n, zero match
    counts smoothed to 1 / (count + 1), times the brevity penalty. An order
    longer than the candidate has no n-grams and contributes 1 / (0 + 1).
    """
    cand, ref = tokenize_words(candidate), tokenize_words(reference)
    if not ref:
        raise MetricUndefinedError("BLEU is undefined for an empty reference")
    if not cand:
        return 0.0
    if max_n < 1:
        raise ParameterError(f"max_n must be >= 1, got {max_n}")
    log_sum = 0.0
    for n in range(1, max_n + 1):
        cand_counts = Counter(ngrams(cand, n))
        ref_counts = Counter(ngrams(ref, n))
        matched = sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
        total = sum(cand_counts.values())
        precision = matched / total if matched > 0 else 1.0 / (total + 1)
        log_sum += math.log(precision)
    return brevity_penalty(len(ref), len(cand)) * math.exp(log_sum / max_n)


def _align(cand: list[str], ref: list[str], lexicon: LabelLexicon) -> list[tuple[int, int]]:
    """Greedy one-to-one unigram alignment: exact, then form, then synonym."""
    stages = [
        lambda a, b: a == b,
        lambda a, b: lexicon.form_label(a) is not None and lexicon.form_label(a) == lexicon.form_label(b),
        lambda a, b: lexicon.canonical(a) is not None and lexicon.canonical(a) == lexicon.canonical(b),
    ]
    used_c, used_r, pairs = set(), set(), []
    for same in stages:
        for i, word in enumerate(cand):
            if i in used_c:
                continue
            for j, other in enumerate(ref):
                if j not in used_r and same(word, other):
                    used_c.add(i)
                    used_r.add(j)
                    pairs.append((i, j))
                    break
    return sorted(pairs)


def meteor_simplified(candidate: str, reference: str, lexicon: LabelLexicon) -> float:
    cand, ref = tokenize_words(candidate), tokenize_words(reference)
    if not ref:
        raise MetricUndefinedError("METEOR is undefined for an empty reference")
    pairs = _align(cand, ref, lexicon) if cand else []
    matches = len(pairs)
    if matches == 0:
        return 0.0
    precision, recall = matches / len(cand), matches / len(ref)
    f_mean = 10 * precision * recall / (recall + 9 * precision)
    chunks = 1 + sum(1 for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]) if not (i1 == i0 + 1 and j1 == j0 + 1))
    penalty = 0.5 * (chunks / matches) ** 3
    return f_mean * (1 - penalty)


def text_scores(candidate: str, reference: str, lexicon: LabelLexicon) -> dict[str, float]:
    return {
        **rouge(candidate, reference),
        "bleu": bleu(candidate, reference),
        "meteor": meteor_simplified(candidate, reference, lexicon),
    }


### Output formats


class OutputFormat(str, Enum):
    A = "A"
    B = "B"
    C = "C"


FORMAT_C = "This is a 3D skeleton sequence of a person. From their movements, it can be observed that their emotion is {label}."


def _article(word: str) -> str:
    return "an" if word[:1].lower() in "aeiou" else "a"


def render_output_format(fmt: OutputFormat | str, label: str, lexicon: LabelLexicon | None = None) -> str:
    """
    A: the label itself. B: "This is a/an <word> person." C: the long sentence.
    With a lexicon, a canonical label is rendered through its adjective (B)
    or lower-case noun (C); any other word is inserted as given.
    """
    try:
        fmt = OutputFormat(fmt)
    except ValueError as e:
        raise ParameterError(f"unknown output format {fmt!r}; expected one of A, B, C") from e
    canonical = lexicon is not None and label in lexicon.entries
    if fmt is OutputFormat.A:
        return label
    if fmt is OutputFormat.B:
        word = lexicon.adjective(label) if canonical else label
        return f"This is {_article(word)} {word} person."
    return FORMAT_C.format(label=label.lower() if canonical else label)


### Reports


@dataclass
class EvaluationReport:
    records: list[GenerationRecord]
    name: str = "evaluation"

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for r in self.records:
            row = {k: v for k, v in asdict(r).items() if k != "scores"}
            row["correct"] = r.correct
            row.update(r.scores)
            rows.append(row)
        return pd.DataFrame(rows)

    def summary(self) -> dict:
        if not self.records:
            raise ParameterError("report has no records")
        df = self.to_frame()
        out: dict = {"name": self.name, "records": len(df), "transport_errors": int(df["error"].notna().sum())}
        recognition = [r for r in self.records if r.kind == "recognition"]
        if recognition:
            out["accuracy"] = accuracy(recognition)
            out["error_rate"] = sum(r.extracted == ERROR for r in recognition) / len(recognition)
            out["per_dataset_accuracy"] = {
                ds: accuracy([r for r in recognition if r.dataset_id == ds]) for ds in sorted({r.dataset_id for r in recognition})
            }
        for metric in ("rouge1_f", "rougeL_f", "bleu", "meteor"):
            if metric in df.columns and df[metric].notna().any():
                out[metric] = float(df[metric].mean())
        return out

    def markdown(self) -> str:
        summary = self.summary()
        markdown = f"## Evaluation: {self.name}\n\n"
        markdown += "| Metric | Value |\n|--------|-------|\n"
        for key in ("records", "accuracy", "error_rate", "rouge1_f", "rougeL_f", "bleu", "meteor", "transport_errors"):
            if key in summary:
                value = summary[key]
                markdown += f"| {key} | {value:.4f} |\n" if isinstance(value, float) else f"| {key} | {value} |\n"
        if summary.get("per_dataset_accuracy"):
            markdown += "\n### Accuracy per dataset\n\n| Dataset | Accuracy |\n|---------|----------|\n"
            for ds, acc in summary["per_dataset_accuracy"].items():
                markdown += f"| {ds or '-'} | {acc:.4f} |\n"
        return markdown

    def write(self, out_dir: Path) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(out_dir / "records.csv", index=False)
        (out_dir / "summary.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True))
        (out_dir / "summary.md").write_text(self.markdown())
        logger.info(f"wrote evaluation report to {out_dir}")
        return out_dir
