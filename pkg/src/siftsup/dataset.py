"""Dataset discovery and the correspondence preprocessing cache.

A dataset root holds a garment directory (``cloth/``) and a person directory (``image/``)
whose files pair up by filename stem, optionally with an upper-body mask directory.
Preprocessing writes one cache directory per sample::

    <out>/<sample_id>/garment.kp     keypoints of the garment image
    <out>/<sample_id>/person.kp      keypoints of the person image
    <out>/<sample_id>/matches.txt    filtered matches (garment_idx person_idx distance)
    <out>/<sample_id>/report.txt     FilterReport
    <out>/<sample_id>/ref_<h>x<w>.txt  one ReferenceAttention per resolution

and ``<out>/summary.txt`` with corpus statistics.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from tabulate import tabulate

from siftsup.config import SiftSupConfig
from siftsup.errors import MissingDirectory, ParseError
from siftsup.filtering import FilterReport, run_filter_cascade
from siftsup.imgproc import read_image, resize, to_gray
from siftsup.matching import MatchPair, match_ratio_test, write_matches
from siftsup.refattn import build_multiscale
from siftsup.sift import detect_and_describe, restrict_to_mask, write_keypoints
from siftsup.workers import WorkerPool

logger = logging.getLogger("siftsup.dataset")

IMAGE_SUFFIXES = (".png", ".ppm")


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    garment_path: Path
    person_path: Path
    mask_path: Path | None = None
    paired: bool = True


@dataclass
class DatasetIndex:
    root: Path
    samples: list[SampleRecord] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class SampleResult:
    sample_id: str
    paired: bool
    report: FilterReport
    supervised: tuple[int, ...]


@dataclass
class PreprocessSummary:
    """Corpus statistics. ``elapsed`` is wall-clock and stays out of :meth:`to_text`."""

    resolutions: tuple[tuple[int, int], ...]
    results: list[SampleResult] = field(default_factory=list)
    failures: list[tuple[str, str]] = field(default_factory=list)
    elapsed: float = 0.0

    @property
    def stage_totals(self) -> dict[str, int]:
        totals = dict.fromkeys(FilterReport.stage_names, 0)
        for r in self.results:
            for name, value in r.report.counts().items():
                totals[name] += value
        return totals

    @property
    def zero_match_fraction(self) -> float:
        if not self.results:
            return 0.0
        return sum(1 for r in self.results if r.report.after_ransac == 0) / len(self.results)

    @property
    def mean_matches(self) -> float:
        if not self.results:
            return 0.0
        return float(np.mean([r.report.after_ransac for r in self.results]))

    @property
    def mean_supervised(self) -> dict[tuple[int, int], float]:
        if not self.results:
            return {res: 0.0 for res in self.resolutions}
        return {
            res: float(np.mean([r.supervised[k] for r in self.results])) for k, res in enumerate(self.resolutions)
        }

    def to_text(self) -> str:
        lines = [
            f"samples={len(self.results) + len(self.failures)}",
            f"processed={len(self.results)}",
            f"failed={len(self.failures)}",
            f"unpaired={sum(1 for r in self.results if not r.paired)}",
        ]
        lines += [f"{name}={value}" for name, value in self.stage_totals.items()]
        lines.append(f"zero_match_fraction={self.zero_match_fraction:.9g}")
        lines.append(f"mean_matches={self.mean_matches:.9g}")
        for (gh, gw), value in self.mean_supervised.items():
            lines.append(f"mean_supervised_{gh}x{gw}={value:.9g}")
        lines += [f"error {sample_id}: {message}" for sample_id, message in self.failures]
        return "".join(line + "\n" for line in lines)

    def table(self) -> str:
        headers = ["sample", "paired", *FilterReport.stage_names] + [f"|M| {gh}x{gw}" for gh, gw in self.resolutions]
        rows = [
            [r.sample_id, "yes" if r.paired else "no", *r.report.counts().values(), *r.supervised]
            for r in self.results
        ]
        return tabulate(rows, headers=headers, tablefmt="simple")


# ---------------------------------------------------------------------------
# Discovery
# ---------------------------------------------------------------------------


def _images_by_stem(directory: Path) -> dict[str, Path]:
    found: dict[str, Path] = {}
    for path in sorted(directory.iterdir()):
        if path.is_file() and path.suffix.lower() in IMAGE_SUFFIXES:
            found.setdefault(path.stem, path)
    return found


def _require_dir(path: Path) -> Path:
    if not path.is_dir():
        raise MissingDirectory(f"directory not found: {path}")
    return path


def _mask_for(masks: dict[str, Path] | None, stem: str) -> Path | None:
    return masks.get(stem) if masks is not None else None


def scan_dataset(
    root: str | Path, cloth_dir: str = "cloth", image_dir: str = "image", mask_dir: str | None = None
) -> DatasetIndex:
    """Pair garment and person images by filename stem; unpaired stems are skipped with a warning."""
    root = _require_dir(Path(root))
    garments = _images_by_stem(_require_dir(root / cloth_dir))
    persons = _images_by_stem(_require_dir(root / image_dir))
    masks = _images_by_stem(_require_dir(root / mask_dir)) if mask_dir else None

    index = DatasetIndex(root=root)
    for stem in sorted(garments.keys() | persons.keys()):
        if stem not in garments or stem not in persons:
            index.skipped.append(stem)
            continue
        index.samples.append(SampleRecord(stem, garments[stem], persons[stem], _mask_for(masks, stem)))
    if index.skipped:
        logger.warning("skipped %d unpaired stems: %s", len(index.skipped), ", ".join(index.skipped))
    logger.info("scanned %s: %d samples", root, len(index.samples))
    return index


def read_pairs_file(path: str | Path) -> list[tuple[str, str]]:
    """Read ``person garment`` lines (``*_pairs.txt`` layout). Extensions are optional."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ParseError(f"cannot read {path}: {e}") from e
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ParseError(f"pairs line {lineno}: expected 'person garment', got {line!r}")
        pairs.append((Path(parts[0]).stem, Path(parts[1]).stem))
    return pairs


def index_from_pairs(
    root: str | Path,
    pairs: list[tuple[str, str]],
    cloth_dir: str = "cloth",
    image_dir: str = "image",
    mask_dir: str | None = None,
) -> DatasetIndex:
    """Index explicit (person, garment) pairs; a pair whose stems differ is an unpaired sample."""
    root = _require_dir(Path(root))
    garments = _images_by_stem(_require_dir(root / cloth_dir))
    persons = _images_by_stem(_require_dir(root / image_dir))
    masks = _images_by_stem(_require_dir(root / mask_dir)) if mask_dir else None

    index = DatasetIndex(root=root)
    seen: set[str] = set()
    for person, garment in pairs:
        sample_id = person if person == garment else f"{person}+{garment}"
        if person not in persons or garment not in garments or sample_id in seen:
            index.skipped.append(sample_id)
            continue
        seen.add(sample_id)
        index.samples.append(
            SampleRecord(sample_id, garments[garment], persons[person], _mask_for(masks, person), person == garment)
        )
    index.samples.sort(key=lambda s: s.sample_id)
    if index.skipped:
        logger.warning("skipped %d pairs: %s", len(index.skipped), ", ".join(index.skipped))
    return index


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


def _load(path: Path, size: tuple[int, int] | None):
    img = read_image(path)
    if size is not None:
        img = resize(img, width=size[1], height=size[0])
    return img


def _load_mask(path: Path | None, shape: tuple[int, int]) -> np.ndarray | None:
    if path is None:
        return None
    mask = to_gray(read_image(path)).data > 0.5
    if mask.shape != shape:
        pil = Image.fromarray(mask).resize((shape[1], shape[0]), Image.Resampling.NEAREST)
        mask = np.asarray(pil, dtype=bool)
    return mask


def preprocess_sample(record: SampleRecord, cfg: SiftSupConfig, out_dir: Path) -> SampleResult:
    """detect -> match -> filter -> reference attention for one sample; writes its cache directory."""
    garment = _load(record.garment_path, cfg.pipeline.resize)
    person = _load(record.person_path, cfg.pipeline.resize)
    mask = _load_mask(record.mask_path, (person.height, person.width))

    kps_g = detect_and_describe(to_gray(garment), cfg.sift)
    kps_p = restrict_to_mask(detect_and_describe(to_gray(person), cfg.sift), mask)

    filtered: list[MatchPair] = []
    report = FilterReport()
    if record.paired and kps_g and kps_p:
        matches = match_ratio_test(kps_g, kps_p, cfg.sift.ratio)
        filtered, report = run_filter_cascade(matches, kps_g, kps_p, cfg.filter)

    refs = build_multiscale(
        filtered,
        kps_g,
        kps_p,
        (person.height, person.width),
        cfg.pipeline.resolutions,
        garment_dims=(garment.height, garment.width),
        mask=mask,
    )

    sample_dir = out_dir / record.sample_id
    sample_dir.mkdir(parents=True, exist_ok=True)
    write_keypoints(kps_g, sample_dir / "garment.kp")
    write_keypoints(kps_p, sample_dir / "person.kp")
    write_matches(filtered, sample_dir / "matches.txt")
    (sample_dir / "report.txt").write_text(report.to_text(), encoding="utf-8")
    for (gh, gw), ref in zip(cfg.pipeline.resolutions, refs):
        ref.write(sample_dir / f"ref_{gh}x{gw}.txt")

    logger.info("%s: %d keypoints / %d keypoints, %d matches kept", record.sample_id, len(kps_g), len(kps_p),
                report.after_ransac)
    return SampleResult(record.sample_id, record.paired, report, tuple(len(r) for r in refs))


def preprocess_all(index: DatasetIndex, cfg: SiftSupConfig, out_dir: str | Path) -> PreprocessSummary:
    """Process every sample on a bounded worker pool; per-sample failures are recorded, not raised."""
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()

    pool = WorkerPool(cfg.pipeline.workers)
    jobs = [
        (record.sample_id, lambda record=record: preprocess_sample(record, cfg, out)) for record in index.samples
    ]
    tasks = pool.run(jobs)

    summary = PreprocessSummary(resolutions=tuple(cfg.pipeline.resolutions))
    summary.results = [t.result for t in sorted(tasks, key=lambda t: t.task_id) if t.ok]
    summary.failures = [(t["task_id"], t["error"] or "unknown error") for t in pool.list_tasks("failed")]
    summary.elapsed = time.perf_counter() - started

    (out / "summary.txt").write_text(summary.to_text(), encoding="utf-8")
    logger.info(
        "preprocessed %d samples (%d failed) in %.2fs", len(summary.results), len(summary.failures), summary.elapsed
    )
    return summary
