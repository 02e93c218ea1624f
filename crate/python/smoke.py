"""Smoke test for the `amodal` extension module.

Build with `cargo build -p amodal-py --release`, then copy
`target/release/libamodal.so` to `amodal.so` somewhere on PYTHONPATH (or set
AMODAL_LIB_DIR to a directory containing it).
"""

import json
import os
import sys

sys.path.insert(0, os.environ.get("AMODAL_LIB_DIR", os.path.dirname(os.path.abspath(__file__))))

import amodal  # noqa: E402


def main() -> None:
    mask = [[0, 1, 1], [0, 1, 1], [0, 0, 0]]
    rle = amodal.encode_rle(mask)
    assert json.loads(rle) == {"size": [3, 3], "counts": [3, 2, 1, 2, 1]}, rle
    assert amodal.decode_rle(rle) == mask

    assert amodal.mask_iou(mask, mask) == 1.0
    assert amodal.mask_iou([[0]], [[0]]) == 1.0

    dice, focal, iou, total = amodal.losses([[1.0, 0.0]], [[1, 0]], 1.0)
    assert dice == 0.0 and iou == 0.0
    assert abs(total - (dice + focal + 0.05 * iou)) < 1e-12

    assert amodal.refine_confidence(0.8, 0.5) == 0.4

    manifest, report = amodal.synthesize_manifest(10, seed=3)
    n_instances, n_images, poi, avg_ror = amodal.corpus_stats(manifest)
    assert (n_instances, poi) == (20, 50.0), (n_instances, poi)
    assert 0.0 < avg_ror < 100.0
    assert json.loads(report)["emitted_pairs"] == 10

    # perfect results: every ground-truth amodal mask with score 1
    anns = json.loads(manifest)["annotations"]
    results = [
        {
            "image_id": a["image_id"],
            "bbox": [0, 0, 1, 1],
            "score": 1.0,
            "segmentation": a["amodal_segmentation"],
            "iou_estimate": 1.0,
            "score_refined": 1.0,
        }
        for a in anns
    ]
    ev = json.loads(amodal.evaluate(manifest, json.dumps(results)))
    assert ev["ap"] == 100.0 and ev["ar"] == 100.0, ev

    print("python smoke test passed (amodal %s)" % amodal.__version__)


if __name__ == "__main__":
    main()
