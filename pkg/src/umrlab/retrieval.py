"""Embedding index, cosine top-k search and Recall@k evaluation.

Index vectors are L2-normalized and quantized to float32 at build time; all
search determinism guarantees are stated over those stored 32-bit values,
so a save/load round-trip can never change a result. Search is exhaustive
(flat); pools at this scale never justify approximate structures.
"""

from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from collections.abc import Sequence

import numpy as np

from .datagen import Candidate, Corpus, Sample
from .encoder import Encoder, embed_raw
from .errors import ContractError, FormatError, LengthError
from .prompts import assemble_prompt
from .tasks import MODALITIES, MODALITY_CODES

INDEX_MAGIC = b"PUMAIDX1"
_RECORD_PAD = b"\x00\x00"  # id(4) + modality(1) + dataset(1) -> pad to 8


@dataclass
class EmbeddingIndex:
    ids: np.ndarray  # int64
    modality_codes: np.ndarray  # uint8
    dataset_codes: np.ndarray  # uint8
    vectors: np.ndarray  # float32, rows normalized (or all-zero degenerate)
    dataset_names: tuple[str, ...] | None = None

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def dataset_code(self, name: str) -> int:
        if self.dataset_names is None:
            raise ContractError("index loaded without dataset names; filter by code")
        return self.dataset_names.index(name)


def _normalize(vec: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    return vec / max(norm, eps)


def build_index(encoder: Encoder, candidates: Sequence[Candidate], k_layers: int | None = None) -> EmbeddingIndex:
    """Prompt, forward and normalize every candidate into a flat index."""
    depth = encoder.config.n_layers if k_layers is None else k_layers
    names = tuple(sorted({c.dataset for c in candidates}))
    if len(names) > 255:
        raise ContractError("dataset codes are u8; at most 255 datasets")
    code_of = {n: i for i, n in enumerate(names)}
    n = len(candidates)
    ids = np.zeros(n, dtype=np.int64)
    modality = np.zeros(n, dtype=np.uint8)
    dataset = np.zeros(n, dtype=np.uint8)
    vectors = np.zeros((n, encoder.config.d_model), dtype=np.float32)
    for row, cand in enumerate(candidates):
        try:
            seq = assemble_prompt(cand, "candidate", encoder.config.max_seq)
        except LengthError as err:
            raise LengthError(f"candidate {cand.id}: {err}") from None
        vec = _normalize(embed_raw(encoder, seq, depth))
        ids[row] = cand.id
        modality[row] = MODALITY_CODES[cand.modality]
        dataset[row] = code_of[cand.dataset]
        vectors[row] = vec.astype(np.float32)
    if len(set(ids.tolist())) != n:
        raise ContractError("candidate ids must be unique")
    return EmbeddingIndex(ids, modality, dataset, vectors, names)


def embed_query(encoder: Encoder, sample: Sample, k_layers: int | None = None) -> np.ndarray:
    depth = encoder.config.n_layers if k_layers is None else k_layers
    seq = assemble_prompt(sample, "query", encoder.config.max_seq)
    return _normalize(embed_raw(encoder, seq, depth))


def embed_candidate(encoder: Encoder, candidate: Candidate, k_layers: int | None = None) -> np.ndarray:
    depth = encoder.config.n_layers if k_layers is None else k_layers
    seq = assemble_prompt(candidate, "candidate", encoder.config.max_seq)
    return _normalize(embed_raw(encoder, seq, depth))


def search_topk(
    index: EmbeddingIndex,
    query: np.ndarray,
    k: int,
    datasets: Sequence[str] | Sequence[int] | None = None,
) -> list[tuple[int, float]]:
    """Top-k by cosine, descending; ties broken by ascending candidate id."""
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (index.dim,):
        raise ContractError(f"query width {query.shape} != index dim {index.dim}")
    if datasets is None:
        keep = slice(None)
    else:
        codes = {
            index.dataset_code(d) if isinstance(d, str) else int(d) for d in datasets
        }
        keep = np.isin(index.dataset_codes, sorted(codes))
    ids = index.ids[keep]
    if ids.size == 0:
        return []
    scores = index.vectors[keep].astype(np.float64) @ query
    order = np.lexsort((ids, -scores))[:k]
    return [(int(ids[i]), float(scores[i])) for i in order]


def recall_at_k(
    ranked: dict[int, Sequence[int]], gold: dict[int, int], k: int
) -> float:
    """Fraction of queries whose gold candidate appears in their top k.

    Queries without results count as misses.
    """
    if not gold:
        raise ContractError("recall needs at least one query")
    hits = sum(1 for qid, want in gold.items() if want in list(ranked.get(qid, ()))[:k])
    return hits / len(gold)


@dataclass(frozen=True)
class SeparationStats:
    intra: float
    inter: float

    @property
    def gap(self) -> float:
        return self.intra - self.inter


def modality_separation(index: EmbeddingIndex) -> SeparationStats:
    """Mean pairwise cosine within vs across modality groups (no self-pairs)."""
    codes = index.modality_codes
    present, counts = np.unique(codes, return_counts=True)
    if len(present) < 2:
        raise ContractError("separation needs at least two modalities in the index")
    if counts.min() < 2:
        raise ContractError("separation needs at least two candidates per modality")
    v = index.vectors.astype(np.float64)
    sims = v @ v.T
    same = codes[None, :] == codes[:, None]
    off_diag = ~np.eye(len(index), dtype=bool)
    intra = float(sims[same & off_diag].mean())
    inter = float(sims[~same].mean())
    return SeparationStats(intra=intra, inter=inter)


def pca_coords(index: EmbeddingIndex) -> np.ndarray:
    """2-component PCA of the stored vectors, for external plotting."""
    v = index.vectors.astype(np.float64)
    centered = v - v.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2]
    # fix sign: largest-magnitude coordinate of each component positive
    for i in range(comps.shape[0]):
        j = int(np.abs(comps[i]).argmax())
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return centered @ comps.T


def write_pca_csv(index: EmbeddingIndex, path: str | Path) -> None:
    coords = pca_coords(index)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "modality", "x", "y"])
        for i in range(len(index)):
            writer.writerow(
                [
                    int(index.ids[i]),
                    MODALITIES[index.modality_codes[i]],
                    f"{coords[i, 0]:.8g}",
                    f"{coords[i, 1]:.8g}",
                ]
            )


# ---------------------------------------------------------------------------
# persistence


def save_index(index: EmbeddingIndex, path: str | Path) -> None:
    out = bytearray()
    out += INDEX_MAGIC
    out += struct.pack("<II", len(index), index.dim)
    for i in range(len(index)):
        out += struct.pack(
            "<IBB", int(index.ids[i]), int(index.modality_codes[i]), int(index.dataset_codes[i])
        )
        out += _RECORD_PAD
        out += index.vectors[i].astype("<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def load_index(path: str | Path) -> EmbeddingIndex:
    blob = Path(path).read_bytes()
    if blob[: len(INDEX_MAGIC)] != INDEX_MAGIC:
        raise FormatError("bad index magic", 0)
    offset = len(INDEX_MAGIC)
    if len(blob) < offset + 8:
        raise FormatError("truncated index header", offset)
    count, dim = struct.unpack_from("<II", blob, offset)
    offset += 8
    record = 4 + 1 + 1 + len(_RECORD_PAD) + 4 * dim
    ids = np.zeros(count, dtype=np.int64)
    modality = np.zeros(count, dtype=np.uint8)
    dataset = np.zeros(count, dtype=np.uint8)
    vectors = np.zeros((count, dim), dtype=np.float32)
    for i in range(count):
        if offset + record > len(blob):
            raise FormatError(f"truncated index record {i}", offset)
        cid, mod, ds = struct.unpack_from("<IBB", blob, offset)
        ids[i] = cid
        modality[i] = mod
        dataset[i] = ds
        start = offset + 8
        vectors[i] = np.frombuffer(blob, dtype="<f4", count=dim, offset=start)
        offset += record
    if offset != len(blob):
        raise FormatError("trailing bytes after index payload", offset)
    return EmbeddingIndex(ids, modality, dataset, vectors, dataset_names=None)


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class ReportRow:
    task: str
    dataset: str
    scope: str
    k: int
    recall: float


@dataclass
class EvalReport:
    rows: list[ReportRow]
    checkpoint: str
    corpus_seed: int
    config_hash: str

    def mean_recall(self, scope: str, k: int | None = None) -> float:
        chosen = [r for r in self.rows if r.scope == scope and (k is None or r.k == k)]
        if not chosen:
            raise ContractError(f"no report rows for scope {scope!r}")
        return sum(r.recall for r in chosen) / len(chosen)

    def cell(self, task: str, dataset: str, scope: str, k: int) -> float:
        for r in self.rows:
            if (r.task, r.dataset, r.scope, r.k) == (task, dataset, scope, k):
                return r.recall
        raise ContractError(f"no report row for {(task, dataset, scope, k)}")

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["task", "dataset", "scope", "k", "recall", "checkpoint", "config_hash"])
            for r in self.rows:
                writer.writerow(
                    [r.task, r.dataset, r.scope, r.k, f"{r.recall:.6f}", self.checkpoint, self.config_hash]
                )


def config_fingerprint(settings: dict) -> str:
    canon = ",".join(f"{key}={settings[key]!r}" for key in sorted(settings))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def evaluate(
    encoder: Encoder,
    corpus: Corpus,
    scopes: Sequence[str] = ("local",),
    ks: Sequence[int] = (5,),
    k_overrides: dict[str, int] | None = None,
    checkpoint: str = "",
    settings: dict | None = None,
    queries: Sequence[Sample] | None = None,
) -> EvalReport:
    """Recall over the test split, per (task, dataset, scope, k).

    The index is built once over all candidates; scopes only change the
    search filter. ``k_overrides`` replaces the requested k values for a
    dataset tag (the Recall@10-style per-dataset convention).
    """
    for scope in scopes:
        if scope not in ("local", "global"):
            raise ContractError(f"scope must be 'local' or 'global', got {scope!r}")
    if encoder.config.d_model < 1 or not corpus.pools:
        raise ContractError("nothing to evaluate")
    overrides = k_overrides or {}
    index = build_index(encoder, corpus.all_candidates())
    test = list(queries) if queries is not None else list(corpus.test)
    by_dataset: dict[str, list[Sample]] = {}
    for q in test:
        by_dataset.setdefault(q.dataset, []).append(q)
    rows: list[ReportRow] = []
    for dataset in sorted(by_dataset):
        group = by_dataset[dataset]
        k_list = sorted({overrides.get(dataset, k) for k in ks})
        k_max = max(k_list)
        task = group[0].task
        for scope in scopes:
            filt = None if scope == "global" else [dataset]
            ranked = {}
            for q in group:
                hits = search_topk(index, embed_query(encoder, q), k_max, filt)
                ranked[q.id] = [cid for cid, _ in hits]
            gold = {q.id: q.gold for q in group}
            for k in k_list:
                rows.append(
                    ReportRow(
                        task=task,
                        dataset=dataset,
                        scope=scope,
                        k=k,
                        recall=recall_at_k(ranked, gold, k),
                    )
                )
    return EvalReport(
        rows=rows,
        checkpoint=checkpoint,
        corpus_seed=corpus.seed,
        config_hash=config_fingerprint(settings or {}),
    )
