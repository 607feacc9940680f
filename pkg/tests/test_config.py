import pytest

from weakseg.config import Config, load_config, parse_text, parse_value
from weakseg.nn import ConfigurationError


def test_text_roundtrip():
    cfg = Config(cls_iters=7, aug_flip=False, anchor_scales=(4.0, 8.0), beta=0.25)
    assert Config().replace(**parse_text(cfg.to_text())) == cfg


def test_parse_values_and_comments():
    vals = parse_text("# header\nlr = 0.01  # step\n\naug_scales = 48, 64\neval_stages = no\n")
    assert vals == {"lr": 0.01, "aug_scales": (48, 64), "eval_stages": False}


@pytest.mark.parametrize("text", ["nope = 1", "lr = fast", "aug_flip = maybe", "cls_iters"])
def test_bad_input_raises(text):
    with pytest.raises(ConfigurationError):
        parse_text(text)


def test_override_beats_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("seed = 3\ncls_iters = 10\n")
    cfg = load_config(p, {"seed": "9"})
    assert cfg.seed == 9 and cfg.cls_iters == 10
    assert load_config(None, {"beta": 0.7}).beta == 0.7
    assert parse_value("threads", " 4 ") == 4
