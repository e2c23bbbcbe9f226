"""Autoregressive generation with truncated top-k sampling.

A prompt is the serialized prefix ``form + id1 + theme + id2``; the model
then decodes the body token by token until it emits EOS.  No hard form
constraint is applied while decoding: the candidate set at each step is
just the k highest-probability tokens (structural tokens masked out), and
one of them is sampled from the renormalized distribution.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import vocab as vocab_mod
from .corpus import Poem, deserialize
from .errors import GutiError, SamplingError
from .forms import ALL_MARKERS, FormCatalog
from .model import ModelParams, forward
from .validator import PhonologyTable, ValidationReport, validate
from .vocab import Vocab


@dataclass(frozen=True)
class SampleConfig:
    k: int = 20
    temperature: float = 1.0
    max_new_tokens: int = 256
    seed: int = 0
    forbid: frozenset[int] | None = None   # None = mask structural tokens

    def __post_init__(self):
        if self.k < 1:
            raise SamplingError("k must be >= 1")
        if self.temperature <= 0:
            raise SamplingError("temperature must be > 0")
        if self.max_new_tokens < 0:
            raise SamplingError("max_new_tokens must be >= 0")


def default_forbid(vocab: Vocab) -> frozenset[int]:
    """Structural ids never sampled into a body: UNK, PAD, BOS, markers."""
    return frozenset((vocab.unk_id, vocab.pad_id, vocab.bos_id) + vocab.marker_ids)


def build_prompt(form_id: str, theme: str, catalog: FormCatalog, vocab: Vocab,
                 acrostic: bool = False) -> list[int]:
    """Token ids of ``form + id1 + theme + id2`` (markers atomic, BOS first).

    With ``acrostic=True`` the form is re-pointed at its acrostic variant
    so the prompt carries the acrostic identifier token.
    """
    spec = catalog.resolve(form_id)
    if acrostic and not spec.acrostic:
        if spec.acrostic_id is None:
            raise SamplingError(f"form {form_id!r} has no acrostic variant")
        spec = catalog.resolve(spec.acrostic_id)
    for marker in ALL_MARKERS:
        if marker in theme:
            raise SamplingError(f"theme contains identifier marker {marker!r}")
    id1, id2 = spec.markers
    text = spec.form_id + id1 + theme + id2
    return [vocab.bos_id] + vocab_mod.encode(text, vocab)


def top_k_distribution(logits: np.ndarray, cfg: SampleConfig) -> tuple[np.ndarray, np.ndarray]:
    """Candidate ids (k highest logits, ties to the lower id) and their
    renormalized softmax(logits/temperature) probabilities."""
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    if cfg.forbid:
        logits = logits.copy()
        logits[list(cfg.forbid)] = -np.inf
    if not np.any(logits > -np.inf):
        raise SamplingError("every token is masked")
    if not np.all(np.isfinite(logits[logits > -np.inf])):
        raise SamplingError("non-finite logits")
    k = min(cfg.k, logits.size)
    # stable sort on the negated logits: equal logits keep ascending id order
    order = np.argsort(-logits, kind="stable")[:k]
    candidates = order[logits[order] > -np.inf]
    z = logits[candidates] / cfg.temperature
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    return candidates, p


def top_k_sample(logits: np.ndarray, cfg: SampleConfig,
                 rng: np.random.Generator) -> int:
    """Sample one token id from the truncated distribution."""
    candidates, p = top_k_distribution(logits, cfg)
    return int(rng.choice(candidates, p=p))


@dataclass(frozen=True)
class GenerationResult:
    token_ids: tuple[int, ...]      # body tokens (after id2, EOS excluded)
    text: str
    truncated: bool                 # ran out of budget/context before EOS


def generate(params: ModelParams, prompt: list[int], cfg: SampleConfig,
             vocab: Vocab) -> GenerationResult:
    """Decode token-by-token until EOS, max_new_tokens, or context is full."""
    context_len = params.config.context_len
    if len(prompt) > context_len:
        raise SamplingError(f"prompt length {len(prompt)} exceeds context "
                            f"{context_len}")
    if cfg.forbid is None:
        cfg = replace(cfg, forbid=default_forbid(vocab))
    rng = np.random.default_rng(cfg.seed)
    ids = list(prompt)
    body: list[int] = []
    truncated = True
    for _ in range(cfg.max_new_tokens):
        if len(ids) >= context_len:
            break
        logits = forward(params, np.asarray([ids]))[0, -1]
        nxt = top_k_sample(logits, cfg, rng)
        if nxt == vocab.eos_id:
            truncated = False
            break
        ids.append(nxt)
        body.append(nxt)
    return GenerationResult(token_ids=tuple(body),
                            text=vocab_mod.decode(body, vocab),
                            truncated=truncated)


@dataclass
class Candidate:
    index: int
    seed: int
    text: str                       # full serialized text (prompt + body)
    body_text: str
    truncated: bool
    poem: Poem | None = None
    report: ValidationReport | None = None
    error: str | None = None

    @property
    def well_formed(self) -> bool:
        return self.report is not None and self.report.well_formed


@dataclass
class BatchReport:
    candidates: list[Candidate] = field(default_factory=list)

    @property
    def well_formed_fraction(self) -> float | None:
        if not self.candidates:
            return None
        return sum(1 for c in self.candidates if c.well_formed) / len(self.candidates)


def generate_batch(params: ModelParams, form_id: str, theme: str, n: int,
                   cfg: SampleConfig, vocab: Vocab, catalog: FormCatalog,
                   table: PhonologyTable | None = None,
                   acrostic: bool = False,
                   strict_phonology: bool = False) -> BatchReport:
    """Generate n candidates with derived seeds and validate each one.

    Per-candidate failures (unparseable body, validation errors) are
    recorded on the candidate; the batch itself never aborts.
    """
    prompt = build_prompt(form_id, theme, catalog, vocab, acrostic=acrostic)
    prompt_text = vocab_mod.decode(prompt, vocab)
    report = BatchReport()
    for i in range(n):
        seed = int(np.random.default_rng([cfg.seed, i]).integers(0, 2 ** 31))
        out = generate(params, prompt, replace(cfg, seed=seed), vocab)
        cand = Candidate(index=i, seed=seed, text=prompt_text + out.text,
                         body_text=out.text, truncated=out.truncated)
        try:
            cand.poem = deserialize(cand.text, catalog)
            cand.report = validate(cand.poem, catalog, table,
                                   strict_phonology=strict_phonology)
        except GutiError as exc:
            cand.error = str(exc)
        report.candidates.append(cand)
    return report
