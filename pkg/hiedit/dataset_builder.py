"""
Synthetic dataset generation: render a target, rewrite its instruction into a
hypothetical question, synthesize source candidates, score them and keep the
top N as samples.

Layout of a dataset directory::

    manifest.json            counts, seeds, weights, split lists
    samples.jsonl            one SampleRecord per line, sorted by sample_id
    blobs/<id>.src.rbt       source image (RBT1)
    blobs/<id>.tgt.rbt       target image (RBT1)
    vocab.json               vocabulary over instructions and captions
    config.json              effective configuration
"""
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from pydantic import ValidationError

from .candidate_scorer import CandidateScorer, MetadataRuleScorer
from .config import CATEGORY_NAMES, PipelineConfig, write_config
from .edit_models import Category, EditSample
from .errors import DataIOError, InputValidationError
from .model import CategoryCounts, DatasetManifest, SampleRecord
from .scene_renderer import generate_source_candidates, render_scene, rewrite_hypothetical
from .seeding import RngStreams
from .segmenter import build_segmenter
from .tensor_io import read_tensor, write_tensor
from .vocabulary import Vocabulary, build_vocab

logger = logging.getLogger(__name__)


def plan_category_counts(count: int, mix: Mapping[str, float]) -> Dict[str, int]:
    """
    Samples per category: one for every category with positive weight, the rest
    by largest remainder over the weights (ties in category order).

    Raises:
        InputValidationError: count smaller than the number of weighted categories
    """
    active = [name for name in CATEGORY_NAMES if mix.get(name, 0.0) > 0]
    if not active:
        raise InputValidationError("category mix has no positive weight")
    if count < len(active):
        raise InputValidationError(f"count={count} cannot cover {len(active)} categories with one sample each")
    counts = {name: (1 if name in active else 0) for name in CATEGORY_NAMES}
    rest = count - len(active)
    total = math.fsum(mix[name] for name in active)
    quotas = {name: rest * mix[name] / total for name in active}
    for name in active:
        counts[name] += int(math.floor(quotas[name]))
    leftover = count - sum(counts.values())
    by_remainder = sorted(active, key=lambda n: (-(quotas[n] - math.floor(quotas[n])), CATEGORY_NAMES.index(n)))
    for name in by_remainder[:leftover]:
        counts[name] += 1
    return counts


def validation_size(n: int, fraction: float, cap: int) -> int:
    """min(cap, max(1, floor(fraction · n))) for n ≥ 2, else 0."""
    if n < 2:
        return 0
    return min(cap, max(1, int(math.floor(fraction * n))))


def plan_split(ids_by_category: Mapping[str, Sequence[str]], fraction: float, cap: int,
               streams: RngStreams) -> Tuple[List[str], List[str], Dict[str, CategoryCounts]]:
    """
    Seeded per-category validation split.

    Returns:
        (sorted train ids, sorted val ids, per-category counts)
    """
    train, val, counts = [], [], {}
    for name in CATEGORY_NAMES:
        ids = sorted(ids_by_category.get(name, ()))
        k = validation_size(len(ids), fraction, cap)
        order = streams.generator("split", name).permutation(len(ids)) if ids else []
        chosen = {ids[i] for i in order[:k]}
        val.extend(i for i in ids if i in chosen)
        train.extend(i for i in ids if i not in chosen)
        counts[name] = CategoryCounts(train=len(ids) - k, val=k)
    return sorted(train), sorted(val), counts


@dataclass
class GeneratedSample:
    sample: EditSample
    record: SampleRecord


def build_scorer(config: PipelineConfig) -> CandidateScorer:
    segmenter = build_segmenter(config.frce.segmenter, config.frce.tau, config.frce.min_area)
    return CandidateScorer(
        rule_weight=config.data.rule_weight,
        perceptual_weight=config.data.perceptual_weight,
        metric=config.data.perceptual_metric,
        psnr_cap_db=config.data.psnr_cap_db,
        rules=MetadataRuleScorer(segmenter),
    )


def generate_scene_samples(category: Category, scene: int, keep: int, config: PipelineConfig,
                           streams: RngStreams, scorer: CandidateScorer) -> List[GeneratedSample]:
    """All samples of one scene; depends only on (master seed, category, scene)."""
    seed = streams.derive_seed("data", category.value, scene)
    dims = (config.image.height, config.image.width, config.image.channels)
    target, metadata = render_scene(category, seed, dims)
    instruction = rewrite_hypothetical(metadata.initial_instruction, category, seed)
    candidates = generate_source_candidates(target, metadata, config.data.candidates_m)
    selected = scorer.score_and_select(candidates, target, metadata, config.data.select_n)
    out = []
    for rank, (score, source) in enumerate(selected[:keep]):
        sample_id = f"{category.value}-{scene:05d}-{rank}"
        sample = EditSample(
            sample_id=sample_id, category=category, instruction=instruction, source=source, target=target,
            seed=seed, object_name=metadata.object_name, state_word=metadata.state_word,
            extras={"rule_score": score.rule_score, "combined": score.combined},
        )
        record = SampleRecord(
            sample_id=sample_id, category=category.value, instruction=instruction,
            initial_instruction=metadata.initial_instruction, object_name=metadata.object_name,
            state_word=metadata.state_word, seed=seed, scene=scene, rank=rank,
            rule_score=score.rule_score, combined=score.combined, split="train",
        )
        out.append(GeneratedSample(sample=sample, record=record))
    return out


def _write_json(path: Path, payload) -> None:
    try:
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        raise DataIOError(f"could not write {path.name}: {e}", str(path)) from e


def build_dataset(config: PipelineConfig, out_dir) -> DatasetManifest:
    """
    Generate ``config.data.count`` samples into ``out_dir``.

    Scenes are generated on a thread pool of ``config.threads`` workers; each scene
    owns a derived seed and results are ordered by sample id, so the bytes written
    do not depend on completion order.

    Raises:
        InputValidationError: count too small for the category mix
        DataIOError: any file that cannot be written, with its path
    """
    start = time.time()
    out = Path(out_dir)
    blobs = out / "blobs"
    try:
        blobs.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataIOError(f"could not create dataset directory: {e}", str(blobs)) from e

    streams = RngStreams(config.seed)
    scorer = build_scorer(config)
    per_category = plan_category_counts(config.data.count, config.data.category_mix)
    n = config.data.select_n
    tasks = []
    for name in CATEGORY_NAMES:
        remaining = per_category[name]
        scene = 0
        while remaining > 0:
            keep = min(n, remaining)
            tasks.append((Category(name), scene, keep))
            remaining -= keep
            scene += 1

    logger.info(f"Generating {config.data.count} samples from {len(tasks)} scenes "
                f"with {config.threads} workers: {per_category}")
    with ThreadPoolExecutor(max_workers=config.threads) as pool:
        batches = list(pool.map(lambda t: generate_scene_samples(t[0], t[1], t[2], config, streams, scorer), tasks))
    generated = sorted((g for batch in batches for g in batch), key=lambda g: g.record.sample_id)

    ids_by_category: Dict[str, List[str]] = {name: [] for name in CATEGORY_NAMES}
    for g in generated:
        ids_by_category[g.record.category].append(g.record.sample_id)
    train_ids, val_ids, counts = plan_split(ids_by_category, config.data.val_fraction, config.data.val_cap, streams)
    val_set = set(val_ids)

    lines = []
    corpus = []
    for g in generated:
        record = g.record.model_copy(update={"split": "val" if g.record.sample_id in val_set else "train"})
        write_tensor(blobs / f"{record.sample_id}.src.rbt", g.sample.source)
        write_tensor(blobs / f"{record.sample_id}.tgt.rbt", g.sample.target)
        lines.append(json.dumps(record.model_dump(), sort_keys=True))
        corpus.extend([g.sample.instruction, g.sample.source_caption, g.sample.target_caption])
    try:
        (out / "samples.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as e:
        raise DataIOError(f"could not write samples: {e}", str(out / "samples.jsonl")) from e

    build_vocab(corpus, r=config.lm.r).save(out / "vocab.json")
    manifest = DatasetManifest(
        seed=config.seed,
        count=len(generated),
        image_shape=[config.image.height, config.image.width, config.image.channels],
        category_mix=dict(config.data.category_mix),
        candidates_m=config.data.candidates_m,
        select_n=config.data.select_n,
        weights={"rule": config.data.rule_weight, "perceptual": config.data.perceptual_weight},
        perceptual_metric=config.data.perceptual_metric,
        counts=counts,
        train_ids=train_ids,
        val_ids=val_ids,
    )
    _write_json(out / "manifest.json", manifest.model_dump())
    write_config(config, out)
    logger.info(f"Dataset written to {out}: {len(train_ids)} train / {len(val_ids)} val "
                f"in {time.time() - start:.2f}s")
    return manifest


@dataclass
class Dataset:
    """A loaded dataset directory; samples are re-validated on read."""
    root: Path
    manifest: DatasetManifest
    records: Dict[str, SampleRecord]
    samples: Dict[str, EditSample]
    vocab: Vocabulary

    def split_ids(self, split: str) -> List[str]:
        if split == "train":
            return list(self.manifest.train_ids)
        if split == "val":
            return list(self.manifest.val_ids)
        raise InputValidationError(f"unknown split {split!r}; use 'train' or 'val'")

    def split_samples(self, split: str) -> List[EditSample]:
        return [self.samples[i] for i in self.split_ids(split)]


def _read_json(path: Path):
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise DataIOError(f"could not read {path.name}: {e}", str(path)) from e
    except json.JSONDecodeError as e:
        raise DataIOError(f"{path.name} is not valid JSON: {e}", str(path)) from e


def load_dataset(root, image_shape: Optional[Sequence[int]] = None) -> Dataset:
    """
    Read and re-validate a dataset directory.

    Raises:
        DataIOError: missing or malformed files, failed sample validation, or images whose
            shape differs from ``image_shape``
    """
    root = Path(root)
    try:
        manifest = DatasetManifest(**_read_json(root / "manifest.json"))
    except ValidationError as e:
        raise DataIOError(f"invalid manifest: {e}", str(root / "manifest.json")) from e
    path = root / "samples.jsonl"
    try:
        lines = [line for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    except OSError as e:
        raise DataIOError(f"could not read samples: {e}", str(path)) from e

    records: Dict[str, SampleRecord] = {}
    samples: Dict[str, EditSample] = {}
    for number, line in enumerate(lines, start=1):
        try:
            record = SampleRecord(**json.loads(line))
        except (json.JSONDecodeError, ValidationError, TypeError) as e:
            raise DataIOError(f"invalid sample record on line {number}: {e}", str(path)) from e
        source = read_tensor(root / "blobs" / f"{record.sample_id}.src.rbt")
        target = read_tensor(root / "blobs" / f"{record.sample_id}.tgt.rbt")
        if image_shape is not None and tuple(source.shape) != tuple(image_shape):
            raise DataIOError(f"sample {record.sample_id} has shape {source.shape}, "
                              f"configured {tuple(image_shape)}", str(root))
        try:
            samples[record.sample_id] = EditSample(
                sample_id=record.sample_id, category=Category(record.category), instruction=record.instruction,
                source=source, target=target, seed=record.seed, object_name=record.object_name,
                state_word=record.state_word,
                extras={"rule_score": record.rule_score, "combined": record.combined},
            )
        except ValueError as e:
            raise DataIOError(f"sample {record.sample_id} failed validation: {e}", str(path)) from e
        records[record.sample_id] = record

    missing = [i for i in manifest.train_ids + manifest.val_ids if i not in samples]
    if missing:
        raise DataIOError(f"manifest lists {len(missing)} samples absent from samples.jsonl "
                          f"(first: {missing[0]})", str(path))
    if set(manifest.train_ids) & set(manifest.val_ids):
        raise DataIOError("train and val splits overlap", str(root / "manifest.json"))
    vocab = Vocabulary.load(root / "vocab.json")
    logger.info(f"Loaded dataset {root}: {len(samples)} samples")
    return Dataset(root=root, manifest=manifest, records=records, samples=samples, vocab=vocab)
