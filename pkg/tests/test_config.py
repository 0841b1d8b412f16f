import math

import pytest
import yaml

from a2fm.config import ConfigError, ExperimentConfig, dump_config, from_dict, load_config


def test_defaults():
    c = ExperimentConfig()
    assert (c.dataset.K, c.dataset.clips_per_class, c.dataset.T, c.dataset.W) == (4, 40, 12, 16)
    assert c.attack.p == math.inf and c.attack.step_size == 0.01 and c.attack.delta_t == 2
    assert c.model.kinds == ["Conv3DTiny", "Factorized21DTiny", "CnnRecurrentTiny"]
    assert c.report.format == "csv"


def test_yaml_round_trip(tmp_path):
    c = ExperimentConfig().replace(attack={"lam_l": 0.05, "target_label": 2, "p": 2.0}, model={"hidden": {"Conv3DTiny": {"c1": 4}}})
    path = dump_config(c, tmp_path / "c.yaml")
    back = load_config(path)
    assert back == c
    assert back.to_yaml() == c.to_yaml()
    assert back.digest() == c.digest()


def test_infinity_is_written_as_text():
    d = yaml.safe_load(ExperimentConfig().to_yaml())
    assert d["attack"]["p"] == "inf"
    assert from_dict(d).attack.p == math.inf


def test_partial_files_take_defaults(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("attack:\n  mode: universal\n  max_videos: 8\n")
    c = load_config(p)
    assert c.attack.mode == "universal" and c.attack.max_videos == 8 and c.dataset.K == 4
    p.write_text("")
    assert load_config(p) == ExperimentConfig()


@pytest.mark.parametrize(
    "data, path",
    [
        ({"atack": {}}, "atack"),
        ({"attack": {"lamda": 1.0}}, "attack.lamda"),
        ({"attack": {"mode": "chaos"}}, "attack.mode"),
        ({"attack": {"p": 3}}, "attack.p"),
        ({"attack": {"step_size": "big"}}, "attack.step_size"),
        ({"attack": {"target_label": 9}}, "attack.target_label"),
        ({"dataset": {"K": 1}}, "dataset.K"),
        ({"dataset": {"T": True}}, "dataset.T"),
        ({"dataset": {"noise": 0.5}}, "dataset.noise"),
        ({"model": {"kinds": ["ResNet"]}}, "model.kinds[0]"),
        ({"model": {"hidden": {"Conv3DTiny": {"c1": "six"}}}}, "model.hidden.Conv3DTiny"),
        ({"model": {"lr": None}}, "model.lr"),
        ({"report": {"format": "xml"}}, "report.format"),
        ({"report": []}, "report"),
    ],
)
def test_invalid_configs_name_the_key(data, path):
    with pytest.raises(ConfigError) as e:
        from_dict(data)
    assert e.value.path == path
    assert path in str(e.value)


def test_unreadable_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("attack: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_replace_rejects_unknown_section():
    with pytest.raises(ConfigError):
        ExperimentConfig().replace(plots={})
