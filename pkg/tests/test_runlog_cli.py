import json
import os

import jsonschema
import pytest

from cfgtune.backend import MockBackend
from cfgtune.cli import main
from cfgtune.pipeline import (
    EXIT_BACKEND,
    EXIT_CONFIG,
    EXIT_EVALUATOR,
    load_config,
    run_pipeline,
)
from cfgtune.costs import ConfigurationError
from cfgtune.providers import MockProvider, StatisticJudge
from cfgtune.runlog import RunRecord, read_runlog, runlog_schema, validate_runlog
from cfgtune.types import Bounds, GuidanceScales, Observation


def settings(image_file, tmp_path, **kw):
    base = dict(image=str(image_file), instruction="make the cup red", mock=True,
                out_dir=str(tmp_path / "run"), n_init=3, max_iters=4, patience=4, score_threshold=1.0)
    base.update(kw)
    return load_config(None, base)


def test_runlog_roundtrip(image_file, tmp_path):
    res = run_pipeline(settings(image_file, tmp_path))
    again = read_runlog(res.runlog_path)
    assert again == res.record
    assert RunRecord.from_dict(again.to_dict()) == again
    data = json.loads(res.runlog_path.read_text())
    assert data["schema_version"] == "1"
    validate_runlog(data)


def test_runlog_contents(image_file, tmp_path):
    res = run_pipeline(settings(image_file, tmp_path))
    rec = res.record
    out = tmp_path / "run"
    assert len(rec.observations) == 7
    for o in rec.observations:
        assert (out / o.image_ref).exists()
        assert o.score == o.raw_score / 100
    assert (out / "best.png").read_bytes() == (out / rec.incumbent.image_ref).read_bytes()
    assert rec.cost["n_images"] == 14 and rec.cost["image_size"] == "64x64"
    assert rec.cost["dollars"] is None  # no surcharge configured for this size
    assert rec.edit_prompt["initial"] == rec.edit_prompt["final"]
    assert rec.versions["provider"] == "mock:statistic-judge"


def test_schema_rejects_bad_records():
    with pytest.raises(jsonschema.ValidationError):
        validate_runlog({"schema_version": "2"})
    assert runlog_schema()["$schema"].endswith("2020-12/schema")


def test_write_is_atomic_on_invalid_record(tmp_path):
    from cfgtune.runlog import write_runlog
    rec = RunRecord({}, "x", {"initial": None, "final": None, "history": []}, [], None, "bogus", {})
    with pytest.raises(jsonschema.ValidationError):
        write_runlog(rec, tmp_path)
    assert list(tmp_path.iterdir()) == []


def test_config_precedence(image_file, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"max-iters": 20, "patience": 3, "xi": 0.05}))
    s = load_config(str(cfg), {"image": str(image_file), "instruction": "x", "mock": True, "max_iters": 5})
    assert s.run.max_iterations == 5
    assert s.run.convergence.patience == 3 and s.run.xi == 0.05


@pytest.mark.parametrize("override", [
    {"bounds": "2,1,1,10"},
    {"llm_provider": "nope"},
    {"mock": False},
    {"n_init": 0},
])
def test_invalid_config(image_file, override):
    base = {"image": str(image_file), "instruction": "x", "mock": True}
    base.update(override)
    with pytest.raises(ConfigurationError):
        load_config(None, base)


def test_cli_invalid_bounds_exit_1(image_file, tmp_path, capsys):
    code = main(["run", "--image", str(image_file), "--instruction", "x", "--mock",
                 "--bounds", "2,1,1,10", "--out-dir", str(tmp_path)])
    assert code == EXIT_CONFIG
    assert "error" in capsys.readouterr().err


def test_cli_missing_image_exit_1(tmp_path):
    assert main(["run", "--image", str(tmp_path / "nope.png"), "--instruction", "x", "--mock",
                 "--out-dir", str(tmp_path)]) == EXIT_CONFIG


def test_threshold_reached_in_init_design(image_file, tmp_path):
    # a judge whose floor is above the threshold ends the run after the initial design
    judge = StatisticJudge(GuidanceScales(1.6, 6.0), floor=0.95)
    s = settings(image_file, tmp_path, n_init=3, max_iters=5, score_threshold=0.9)
    rec = run_pipeline(s, provider=judge).record
    assert rec.stop_reason == "score_threshold"
    assert len(rec.observations) == 3


def test_same_config_same_trace(image_file, tmp_path):
    a = run_pipeline(settings(image_file, tmp_path / "a", seed=5)).record
    b = run_pipeline(settings(image_file, tmp_path / "b", seed=5)).record
    assert a.trace() == b.trace()


def test_cli_run_and_replay(image_file, tmp_path, capsys):
    out = tmp_path / "cli"
    code = main(["run", "--image", str(image_file), "--instruction", "make the cup red", "--mock",
                 "--n-init", "3", "--max-iters", "3", "--patience", "3", "--out-dir", str(out)])
    assert code == 0
    printed = capsys.readouterr().out
    assert "runlog:" in printed and "best:" in printed
    assert main(["replay", str(out)]) == 0
    assert "stop reason" in capsys.readouterr().out


def test_replay_bad_file(tmp_path):
    bad = tmp_path / "runlog.json"
    bad.write_text("{}")
    assert main(["replay", str(bad)]) == EXIT_CONFIG


def test_evaluator_failure_exit_2_with_partial_runlog(image_file, tmp_path):
    prompt_turn = {"response_text": "Make the cup red."}
    good = {"response_text": "The score is: 50. ok"}
    bad = {"response_text": "no idea"}
    provider = MockProvider([prompt_turn, good, good] + [bad] * 9)
    res = run_pipeline(settings(image_file, tmp_path), provider=provider)
    assert res.exit_code == EXIT_EVALUATOR
    assert res.record.stop_reason == "evaluator_failure"
    assert len(read_runlog(res.runlog_path).observations) == 2


def test_backend_failure_exit_3(image_file, tmp_path):
    class Down(MockBackend):
        def edit(self, req):
            from cfgtune.backend import BackendError
            raise BackendError("connection refused")

    res = run_pipeline(settings(image_file, tmp_path), backend=Down())
    assert res.exit_code == EXIT_BACKEND
    assert res.record.stop_reason == "backend_failure"
    assert res.runlog_path.exists()


def test_prompt_failure_exit_2(image_file, tmp_path):
    provider = MockProvider([{"response_text": "", "fail": True}] * 3)
    res = run_pipeline(settings(image_file, tmp_path), provider=provider)
    assert res.exit_code == EXIT_EVALUATOR and res.record.stop_reason == "prompt_failure"
    assert res.record.observations == []


def test_refinement_rounds_use_feedback(image_file, tmp_path):
    s = settings(image_file, tmp_path, refine_rounds=1, n_init=2, max_iters=2, patience=2)
    judge = StatisticJudge()
    rec = run_pipeline(s, provider=judge).record
    assert len(rec.rounds) == 2
    assert [h["source"] for h in rec.edit_prompt["history"]] == ["generated", "refined"]
    assert [o.iteration for o in rec.observations] == list(range(8))
    assert rec.rounds[1]["first_iteration"] == 4


def test_known_size_has_dollar_cost(tmp_path):
    from cfgtune.backend import solid_png
    img = tmp_path / "big.png"
    img.write_bytes(solid_png(512, 320))
    s = load_config(None, dict(image=str(img), instruction="x", mock=True, out_dir=str(tmp_path / "o"),
                               n_init=2, max_iters=1, patience=1, score_threshold=1.0))
    rec = run_pipeline(s).record
    assert rec.cost["image_size"] == "512x320" and rec.cost["dollars"] > 0


def test_scripted_fixture_through_cli(image_file, tmp_path):
    script = tmp_path / "script.json"
    turns = [{"response_text": "Make the cup red."}]
    turns += [{"response_text": f"The score is: {40 + i}. step {i}", "prompt_tokens": 800,
               "completion_tokens": 180} for i in range(4)]
    script.write_text(json.dumps(turns))
    code = main(["run", "--image", str(image_file), "--instruction", "x", "--mock",
                 "--llm-fixture", str(script), "--n-init", "2", "--max-iters", "2", "--patience", "2",
                 "--score-threshold", "1.0", "--out-dir", str(tmp_path / "o")])
    assert code == 0
    rec = read_runlog(tmp_path / "o")
    assert [o.raw_score for o in rec.observations] == [40, 41, 42, 43]
    # the prompt-generation turn reported no usage, so the total is partly estimated
    assert not rec.cost["authoritative"]
    assert rec.cost["prompt_tokens"] > 4 * 800 and rec.cost["completion_tokens"] > 4 * 180
