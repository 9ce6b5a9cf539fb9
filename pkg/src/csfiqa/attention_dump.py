"""Export of per-mask survivor sets and attention weights for one image."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Union

from .autodiff import no_grad
from .data import ImageSample, load_sample
from .errors import DataError
from .model import CsfiqaModel, batch_patches
from .model.sfa import AttentionRecord


def capture_attention(model: CsfiqaModel, image: ImageSample) -> Dict[str, AttentionRecord]:
    """Run one forward pass and keep the attention of both fusion directions."""
    fusions = model.fusions()
    for fusion in fusions.values():
        fusion.capture = True
    try:
        with no_grad():
            model(batch_patches([image], model.config.model))
    finally:
        for fusion in fusions.values():
            fusion.capture = False
    records = {}
    for direction, fusion in fusions.items():
        assert fusion.last_record is not None
        records[direction] = fusion.last_record
    return records


def format_records(records: Dict[str, AttentionRecord]) -> str:
    """
    One block per direction and mask: a ``#`` header, one ``survivors``
    line per head, then one row of key weights per head.
    """
    lines: List[str] = []
    for direction, record in records.items():
        for i, (fraction, count, weight) in enumerate(zip(record.fractions, record.counts, record.mix)):
            lines.append(f"# {direction} mask={i} fraction={fraction!r} k={count} weight={weight!r}")
            # (1, heads, 1, keys) for the single image and cls query.
            keep = record.keeps[i][0, :, 0, :]
            weights = record.weights[i][0, :, 0, :]
            for head in range(keep.shape[0]):
                indices = " ".join(str(j) for j in keep[head].nonzero()[0])
                lines.append(f"survivors {head}: {indices}")
            for head in range(weights.shape[0]):
                lines.append(" ".join("%.17g" % w for w in weights[head]))
    return "\n".join(lines) + "\n"


def dump_attention(model: CsfiqaModel, image_path: Union[str, Path], out_path: Union[str, Path]) -> Dict[str, AttentionRecord]:
    """
    Raises:
        DataError: If the image cannot be read or the output written
    """
    sample = load_sample(Path(image_path), 0.0, model.config.model)
    records = capture_attention(model, sample)
    try:
        Path(out_path).write_text(format_records(records), encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot write {out_path}: {e}") from e
    return records
