import json

import pytest

from ddtl.config import ConfigError, config_hash, load_config, parse_config

BASE = {
    "sources": [{"kind": "shapes", "count": 4}],
    "target": {"kind": "blobs-labeled", "count": 4},
    "train": {"seed": 3, "lambdas": [1, 0, 1]},
}


def test_defaults_and_types():
    cfg = parse_config(BASE)
    assert cfg.train.lambdas == (1.0, 0.0, 1.0)
    assert cfg.dff_arch().input_size == (1, 64, 64)
    assert cfg.test is None and cfg.split == 0.5


def test_hash_independent_of_key_order():
    shuffled = json.loads(json.dumps(BASE, sort_keys=True))
    assert config_hash(BASE) == config_hash(dict(reversed(list(shuffled.items()))))
    assert config_hash(BASE) != config_hash(dict(BASE, size=32))


@pytest.mark.parametrize("raw", [
    dict(BASE, extra=1),
    dict(BASE, arch={"width": 3}),
    dict(BASE, sources=[{"kind": "shapes", "count": 4, "colour": "red"}]),
    dict(BASE, sources=[{"kind": "shapes"}]),
    dict(BASE, sources=[{"kind": "shapes", "count": 2, "path": "x"}]),
    dict(BASE, target={"kind": "spirals", "count": 4}),
    dict(BASE, segmentation={"train": {"kind": "blobs-masked", "count": 2, "oops": 1}}),
    [1, 2],
])
def test_strict_parsing(raw):
    with pytest.raises(ConfigError):
        parse_config(raw)


def test_overrides_beat_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(BASE))
    cfg = load_config(path, {"train.seed": 11, "out": "elsewhere"})
    assert cfg.train.seed == 11
    assert cfg.out_dir() == tmp_path / "elsewhere"
    assert cfg.raw["train"]["seed"] == 11


def test_bundled_configs_parse():
    from pathlib import Path
    for path in sorted((Path(__file__).parents[1] / "configs").glob("*.json")):
        load_config(path)
