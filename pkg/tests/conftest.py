import json

import numpy as np
import pytest
import torch

from cuelight.clip import FineTuneConfig, MockBackend, fine_tune_projection
from cuelight.data import AnnotatedImage, write_dataset
from cuelight.guidance import InstanceAnnotation
from cuelight.synthetic import low_light_set

CATEGORIES = ("bicycle", "car", "dog", "person")

_acceptance_key = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def backend():
    return MockBackend(seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_dataset(n=8, size=64, seed=0, per_image=3):
    """Seeded dark images with random square boxes."""
    rng = np.random.default_rng(seed)
    out = []
    for k, img in enumerate(low_light_set(n, seed=seed + 100, h=size, w=size)):
        instances = []
        for x, y in rng.integers(0, size - 12, (per_image, 2)):
            box = (float(x), float(y), float(x + 12), float(y + 12))
            instances.append(InstanceAnnotation(box, CATEGORIES[rng.integers(len(CATEGORIES))], 0.9))
        out.append(AnnotatedImage(img, instances, f"img{k:02d}.png"))
    return out


@pytest.fixture
def fixture_dir(tmp_path):
    """An 8-image annotated dataset on disk plus a matching TOML config."""
    root = tmp_path / "fixture"
    write_dataset(make_dataset(), root / "images", root / "annotations.json")
    (root / "config.toml").write_text(
        "seed = 3\n"
        "[data]\n"
        'images_dir = "images"\n'
        'annotations = "annotations.json"\n'
        "patch_size = 32\n"
        "[prior]\n"
        "epochs = 2\n"
        "[heads]\n"
        "steps = 10\n"
        "[train]\n"
        "epochs = 1\n"
        "lambda_prior = 0.0\n"
        "lambda_content = 0.0\n"
        "lambda_context = 0.0\n"
    )
    return root


CASTS = {"car": (0.6, 0.2, 0.2), "dog": (0.2, 0.6, 0.2), "person": (0.2, 0.2, 0.6)}


def separable_pairs(n_per_class=12, seed=0, size=16):
    """Images tinted by class colour, paired with the class name."""
    rng = np.random.default_rng(seed)
    pairs = []
    for name, cast in CASTS.items():
        for _ in range(n_per_class):
            img = np.clip(np.asarray(cast) + rng.normal(0, 0.05, (size, size, 3)), 0, 1)
            pairs.append((img, name))
    return pairs


@pytest.fixture(scope="session")
def tuned_head(backend):
    """A projection head fitted to the tinted separable set."""
    return fine_tune_projection(backend.default_head(), separable_pairs(), backend, config=FineTuneConfig(steps=200))


def three_box_detections():
    """Two truths and three scored predictions: hit, false positive, hit."""
    truths = [
        {"image_id": "a", "category": "car", "bbox": [0, 0, 10, 10], "score": 1.0},
        {"image_id": "b", "category": "car", "bbox": [20, 20, 10, 10], "score": 1.0},
    ]
    predictions = [
        {"image_id": "a", "category": "car", "bbox": [1, 1, 10, 10], "score": 0.9},
        {"image_id": "a", "category": "car", "bbox": [40, 40, 10, 10], "score": 0.8},
        {"image_id": "b", "category": "car", "bbox": [21, 20, 10, 10], "score": 0.7},
    ]
    return predictions, truths


def enumerated_ap(hits, n_truths):
    """AP from a hand-walked PR curve: the interpolated precision at each recall
    level is the best precision at that recall or beyond."""
    points = []
    for k in range(1, len(hits) + 1):
        tp = sum(hits[:k])
        points.append((tp / n_truths, tp / k))
    ap, prev_recall = 0.0, 0.0
    for recall in sorted({r for r, _ in points}):
        ap += (recall - prev_recall) * max(p for r, p in points if r >= recall)
        prev_recall = recall
    return ap


def read_json(path):
    return json.loads(path.read_text())


@pytest.fixture
def double():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


# -- acceptance reporting ------------------------------------------------------


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.stash[_acceptance_key] = {"passed": rep.passed}


@pytest.fixture
def criterion(request):
    """Record one acceptance criterion; the summary is printed at the end."""
    info = {"number": None, "title": "", "detail": ""}
    yield info
    outcome = request.node.stash.get(_acceptance_key, {"passed": False})
    status = "PASS" if outcome["passed"] else "FAIL"
    line = f"criterion {info['number']:>2}: {status}  {info['title']}"
    if info["detail"]:
        line += f"  ({info['detail']})"
    request.config.stash.setdefault(_acceptance_key, {})[info["number"]] = line
    print("\n" + line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_acceptance_key, {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(lines):
        terminalreporter.write_line(lines[number])
