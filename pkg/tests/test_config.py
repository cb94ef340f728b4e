import pytest

from noduledet.config import ConfigError, PipelineConfig, load_config, parse_config


def test_text_roundtrip():
    cfg = PipelineConfig()
    assert parse_config(cfg.to_text()) == cfg
    odd = cfg.with_overrides({"classifier.variants": "dense, incep", "ensemble.weights": "0.25, 0.75",
                              "data.shape": "8, 64, 64", "mining.hard_mining": "no"})
    assert parse_config(odd.to_text()) == odd


def test_overrides_are_typed():
    cfg = PipelineConfig().with_overrides({"data.n_train": "3", "classifier.width": "0.5",
                                           "classifier.random_mask": "false", "data.shape": "8,64,64"})
    assert cfg.data.n_train == 3 and cfg.classifier.width == 0.5
    assert cfg.classifier.random_mask is False and cfg.data.shape == (8, 64, 64)


def test_fraction_weights():
    cfg = parse_config("[ensemble]\nweights = 1/3, 1/3, 1/3\n")
    assert cfg.ensemble.weights == pytest.approx((1 / 3,) * 3)


def test_variants_without_weights_get_equal_weights():
    cfg = parse_config("[classifier]\nvariants = seres, dense\n")
    assert cfg.classifier.variants == ("seres", "dense")
    assert cfg.ensemble.weights == (0.5, 0.5)


@pytest.mark.parametrize("text", [
    "[nonsense]\nx = 1\n",
    "[data]\nbogus = 1\n",
    "[sampling]\nstrategy = random\n",
    "[classifier]\npooling = average\n",
    "[classifier]\nvariants = vgg\n",
    "[ensemble]\nweights = 0.5, 0.5, 0.1\n",
    "[mining]\noverlap = hausdorff\n",
    "[data]\nn_train = 0\n",
    "[data]\nn_train = many\n",
])
def test_invalid_configs(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_weights_must_match_variants():
    with pytest.raises(ConfigError):
        PipelineConfig().with_overrides({"classifier.variants": "dense", "ensemble.weights": "0.5, 0.5"})


def test_load_config_file(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[data]\nseed = 7\n")
    assert load_config(path).data.seed == 7
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "missing.ini")
