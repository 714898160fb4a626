import pytest

from lesiontransfer import config as C


def test_documentation_roundtrips_to_defaults():
    cfg = C.parse_text(C.documentation())
    assert cfg.values == C.default_config().values


def test_resolved_roundtrip():
    cfg = C.default_config().with_overrides(mu=1.0, gp__mode="interpolated", seed=7)
    back = C.parse_text(cfg.resolved())
    assert back.values == cfg.values and back.digest() == cfg.digest()
    assert cfg.digest() != C.default_config().digest()


def test_parse_types_and_comments():
    cfg = C.parse_text("# comment\nepochs = 2   # trailing\nadapt.sp = off\nlr = 5e-4\n")
    assert cfg["epochs"] == 2 and cfg["adapt.sp"] is False and cfg["lr"] == 5e-4


@pytest.mark.parametrize("text", ["nokey", "unknown = 1", "epochs = two", "adapt.al = maybe",
                                  "gp.mode = mixed", "gamma = 1.0", "mu = -1",
                                  "critic.input = softmax", "batch_size = 0"])
def test_rejects_bad_input(text):
    with pytest.raises(C.ConfigError):
        C.parse_text(text)


def test_softmax_critic_ok_without_gate():
    cfg = C.parse_text("critic.input = softmax\nadapt.qt = false\n")
    assert cfg["critic.input"] == "softmax"


def test_every_key_documented():
    doc = C.documentation().splitlines()
    assert len(doc) == len(C.DEFAULTS)
    assert all("#" in line for line in doc)


def test_packaged_configs_load_by_name(tmp_path):
    assert "shapes" in C.packaged_names()
    cfg = C.load("shapes")
    assert cfg["synth.preset"] == "shapes" and cfg["refine.enabled"] is False
    with pytest.raises(C.ConfigError):
        C.load(str(tmp_path / "missing.txt"))
