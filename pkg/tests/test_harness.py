import json

import numpy as np
import pytest

from unislp import toy_tasks
from unislp.adapters import FUSION, SINGLE, STACK
from unislp.backbone import ModelConfig, UnifiedModel
from unislp.harness import (TABLE_TASKS_6, TABLE_TASKS_9, ExperimentConfig, FreezeViolation, MissingArtifact,
                            NumericFailure, TaskEntry, Workspace, build_vocabulary, evaluate, fit, load_for_module,
                            load_split, load_vocab, make_items, module_cost, module_cost_closed_form, report_lines,
                            report_params, score_outputs, task_payload, total_additional, train_adapter, train_base)
from unislp.taskspace import format_target

from workspaces import PRESET_NAMES, PRESETS, TINY_MODEL, build_workspace, preset


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    return build_workspace(tmp_path_factory.mktemp("ws"))


# ---------------------------------------------------------------- configs


@pytest.mark.parametrize("name", PRESET_NAMES)
def test_preset_round_trip(tmp_path, name):
    exp = ExperimentConfig.load(PRESETS / f"{name}.json")
    again = ExperimentConfig.load(exp.save(tmp_path / "c.json"))
    assert again == exp


@pytest.mark.parametrize("name", PRESET_NAMES)
def test_preset_objective_matches_task_kind(name):
    exp = ExperimentConfig.load(PRESETS / f"{name}.json")
    if exp.module.classification_task:
        assert exp.objective.lambda_ctc == 0.0 and exp.objective.is_classification
    else:
        assert exp.objective.lambda_ctc == 0.3 and not exp.objective.is_classification


def test_lambda_presets():
    exp = ExperimentConfig.load(PRESETS / "fusion_sf_ic.json")
    assert exp.objective.lambda_task == {"sf": 1.0, "ic": 1.0}
    assert exp.with_lambda_preset("equal").objective.lambda_task == {"sf": 0.5, "ic": 0.5}
    assert exp.objective.lambda_task == {"sf": 1.0, "ic": 1.0}
    with pytest.raises(ValueError):
        exp.with_lambda_preset("nope")


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown config keys"):
        ExperimentConfig.from_dict({"name": "x", "lr": 1.0})


def test_missing_config_is_missing_artifact(tmp_path):
    with pytest.raises(MissingArtifact):
        ExperimentConfig.load(tmp_path / "nope.json")


# ---------------------------------------------------------------- scoring


def _perfect(examples, tasks, vocab):
    return [format_target([(t, task_payload(ex, t)) for t in tasks], vocab).tokens for ex in examples]


def test_perfect_outputs_score_perfectly():
    slots = toy_tasks.gen_slots(0, 10)
    er = toy_tasks.gen_classification(0, 10)
    asr = toy_tasks.gen_transduction(0, 10)
    vocab = build_vocabulary({"asr": asr, "er": er, "sf": slots})
    rep = score_outputs(slots, _perfect(slots, ["asr", "sf", "ic"], vocab), ["asr", "sf", "ic"], vocab)
    assert rep["tasks"]["asr"] == {"wer": 0.0, "cer": 0.0}
    assert rep["tasks"]["sf"] == {"slot_f1": 1.0, "slot_cer": 0.0}
    assert rep["tasks"]["ic"] == {"accuracy": 1.0}
    assert set(rep["flags"].values()) == {0}
    rep = score_outputs(asr, _perfect(asr, ["pr"], vocab), ["pr"], vocab)
    assert rep["tasks"]["pr"] == {"per": 0.0}
    rep = score_outputs(er, _perfect(er, ["asr", "er"], vocab), ["asr", "er"], vocab)
    assert rep["tasks"]["er"] == {"accuracy": 1.0}


def test_absent_label_scores_wrong():
    er = toy_tasks.gen_classification(0, 4)
    vocab = build_vocabulary({"er": er})
    outs = [[vocab.bos, *vocab.encode_text(ex.transcript), vocab.eos] for ex in er]
    rep = score_outputs(er, outs, ["asr", "er"], vocab)
    assert rep["tasks"]["er"]["accuracy"] == 0.0 and rep["flags"]["absent"] == 4


def test_report_lines_are_tab_separated():
    lines = report_lines({"tasks": {"asr": {"wer": 0.25}}, "flags": {"absent": 1}})
    assert lines == ["asr/wer\t0.250000", "flags/absent\t1"]


# ---------------------------------------------------------------- training


def test_base_training_is_seed_deterministic(tmp_path):
    a = build_workspace(tmp_path / "a", members=())
    b = build_workspace(tmp_path / "b", members=())
    assert a.base_checkpoint.read_bytes() == b.base_checkpoint.read_bytes()
    assert (a.data_dir / "asr_train.jsonl").read_bytes() == (b.data_dir / "asr_train.jsonl").read_bytes()


@pytest.mark.parametrize("name,kind", [("single_er", SINGLE), ("stack_asr_er", STACK), ("fusion_sf_ic", FUSION)])
def test_adapter_training_keeps_backbone_frozen(ws, name, kind):
    before = ws.base_checkpoint.read_bytes()
    path, result, model, module = train_adapter(preset(name, steps=3), ws)
    assert path.exists() and module.kind == kind
    assert result.frozen_before == result.frozen_after
    assert set(result.optimizer.state) == set(module.trainable_set)
    assert ws.base_checkpoint.read_bytes() == before


def test_stack_logs_both_task_losses(ws):
    train_adapter(preset("stack_asr_er", steps=2), ws)
    recs = [json.loads(l) for l in (ws.root / "logs" / "stack_asr_er.jsonl").read_text().splitlines()]
    assert recs and all("task/asr" in r and "task/er" in r for r in recs)
    assert recs[0]["lambda_task"] == {"asr": 0.1, "er": 0.9} and recs[0]["indicator_ce"] == 1


def _items(ws, exp):
    return make_items(load_split(ws, exp, "train"), exp.module, load_vocab(ws), exp.objective)


def test_empty_trainable_set_rejected(ws):
    exp = preset("base", steps=1)
    model = UnifiedModel(TINY_MODEL)
    model.set_trainable([])
    with pytest.raises(ValueError, match="trainable set is empty"):
        fit(model, None, _items(ws, exp), exp)


def test_non_finite_loss_raises(ws):
    exp = preset("base", steps=2)
    model = UnifiedModel(TINY_MODEL)
    model.set_trainable(model.registry())
    model.registry()["out_proj.bias"].data[:] = np.nan
    with pytest.raises(NumericFailure):
        fit(model, None, _items(ws, exp), exp)


def test_tampering_with_frozen_weights_is_caught(ws):
    exp = preset("single_asr", steps=2)
    model, module = load_for_module(exp, ws, load_vocab(ws), include_owner=False)
    frozen = model.registry()["ctc_head.bias"]

    def tamper(step, loss):
        frozen.data = frozen.data + 1.0
        return False

    with pytest.raises(FreezeViolation):
        fit(model, module, _items(ws, exp), exp, callback=tamper)


def test_base_training_refuses_modules(ws):
    with pytest.raises(ValueError):
        train_base(preset("single_asr"), ws)


# ---------------------------------------------------------------- evaluation


def _schema(d):
    return {k: _schema(v) for k, v in d.items()} if isinstance(d, dict) else type(d).__name__


@pytest.mark.parametrize("name", ["single_asr", "fusion_sf_ic", "stack_asr_er"])
def test_beam_width_does_not_change_report_schema(ws, name):
    exp = preset(name, steps=1)
    if name != "single_asr":
        train_adapter(exp, ws)
    a = evaluate(exp, ws, beam_size=1, limit=2, write=False)
    b = evaluate(exp, ws, beam_size=4, limit=2, write=False)
    a.pop("decode"), b.pop("decode")
    assert _schema(a) == _schema(b)


def test_evaluate_writes_reports(ws):
    evaluate(preset("single_asr"), ws, split="dev", limit=2)
    rep = json.loads((ws.root / "reports" / "single_asr_dev.json").read_text())
    assert rep["n"] == 2 and "wer" in rep["tasks"]["asr"]
    assert (ws.root / "reports" / "single_asr_dev.tsv").read_text().startswith("asr/wer\t")


def test_evaluate_missing_adapter(tmp_path, ws):
    bare = Workspace(tmp_path)
    (tmp_path / "data").mkdir()
    (tmp_path / "data" / "vocab.tsv").write_bytes(ws.vocab_path.read_bytes())
    (tmp_path / "base.ckpt").write_bytes(ws.base_checkpoint.read_bytes())
    with pytest.raises(MissingArtifact, match="adapters/asr.ckpt"):
        evaluate(preset("single_asr"), bare)


# ---------------------------------------------------------------- parameter accounting


@pytest.mark.parametrize("entry", TABLE_TASKS_9, ids=lambda e: e.task)
def test_module_cost_matches_closed_form(entry):
    assert module_cost(TINY_MODEL, entry) == module_cost_closed_form(TINY_MODEL, entry)


def test_report_params_with_no_tasks():
    assert report_params(TINY_MODEL, []) == [] and total_additional(TINY_MODEL, []) == 0


def test_report_params_rows():
    rows = report_params(TINY_MODEL, TABLE_TASKS_6)
    assert [r["tasks"] for r in rows] == list(range(1, 7))
    assert all(r["ratio"] == r["ours"] / r["dedicated"] for r in rows)
    assert rows[1]["ours"] - rows[0]["ours"] == rows[1]["marginal"]


def test_ratio_decreases_from_six_to_nine_tasks():
    ratios = [r["ratio"] for r in report_params(ModelConfig(), TABLE_TASKS_9)][5:]
    assert all(a > b for a, b in zip(ratios, ratios[1:]))


def test_stack_entry_costs_one_adapter():
    single = module_cost(TINY_MODEL, TaskEntry("x", SINGLE, ["x"], 4))
    assert module_cost(TINY_MODEL, TaskEntry("x", STACK, ["y", "x"], 4)) == single
