"""The 8+8 sample synthetic OK-VQA-layout dataset used by tests and ``gerea fixture``."""
from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

import numpy as np

# (question, canonical answer, two alternates, question_type code)
TRAIN = [
    ("What is the man holding over his head?", "umbrella", ("parasol", "kite"), "one"),
    ("What sport is being played here?", "tennis", ("squash", "badminton"), "ten"),
    ("What color is the double decker bus?", "red", ("maroon", "orange"), "one"),
    ("What animal has the longest neck?", "giraffe", ("camel", "ostrich"), "eight"),
    ("Where might this photo have been taken?", "beach", ("coast", "shore"), "nine"),
    ("What food is on the plate?", "pizza", ("flatbread", "pie"), "seven"),
    ("What company makes this phone?", "apple", ("samsung", "nokia"), "four"),
    ("What season is shown in the picture?", "winter", ("fall", "spring"), "nine"),
]
VAL = [
    ("What is the woman holding in her hand?", "umbrella", ("cane", "bag"), "one"),
    ("What game are they playing?", "tennis", ("golf", "baseball"), "ten"),
    ("What color is the fire truck?", "red", ("yellow", "white"), "one"),
    ("What animal is eating the leaves?", "giraffe", ("elephant", "deer"), "eight"),
    ("Where are the people walking?", "beach", ("park", "street"), "nine"),
    ("What is the boy eating?", "pizza", ("sandwich", "burger"), "seven"),
    ("Which brand made this laptop?", "apple", ("dell", "lenovo"), "four"),
    ("What time of year is it?", "winter", ("summer", "autumn"), "nine"),
]
TRAIN_ID0, VAL_ID0 = 1000, 5000


def _answers(canonical, alternates, qid):
    # 10 responses: 6 canonical, 2 of each alternate; answer ids are 1-based like the originals
    words = [canonical] * 6 + [alternates[0]] * 2 + [alternates[1]] * 2
    return [{"answer_id": i + 1, "answer": w, "raw_answer": w, "answer_confidence": "yes"} for i, w in enumerate(words)]


def _write_image(path: Path, seed: int):
    from PIL import Image

    rng = np.random.default_rng(seed)
    arr = (rng.random((32, 32, 3)) * 255).astype(np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")


def write_split(root: Path, coco: str, rows, id0: int):
    questions, annotations = [], []
    for i, (q, a, alts, qtype) in enumerate(rows):
        qid, image_id = id0 + i, id0 + i
        questions.append({"image_id": image_id, "question": q, "question_id": qid})
        annotations.append({"image_id": image_id, "question_id": qid, "question_type": qtype,
                            "answer_type": "other", "answers": _answers(a, alts, qid)})
        _write_image(root / coco / f"COCO_{coco}_{image_id:012d}.jpg", image_id)
    (root / f"OpenEnded_mscoco_{coco}_questions.json").write_text(json.dumps({"questions": questions}, indent=1))
    (root / f"mscoco_{coco}_annotations.json").write_text(json.dumps({"annotations": annotations}, indent=1))


def write_fixture(directory) -> Path:
    """Write ``data/`` and ``config.yaml`` (test profile) under ``directory``; returns the config path."""
    d = Path(directory)
    data = d / "data"
    write_split(data, "train2014", TRAIN, TRAIN_ID0)
    write_split(data, "val2014", VAL, VAL_ID0)
    cfg = resources.files("gerea.resources").joinpath("fixture_config.yaml").read_text(encoding="utf-8")
    path = d / "config.yaml"
    path.write_text(cfg, encoding="utf-8")
    return path
