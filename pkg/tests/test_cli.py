import io
import json

import pytest

from msp_dst.cli import main
from msp_dst.generator import GeneratorConfig, generate_synthetic_corpus


@pytest.fixture(scope="module")
def cli_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli-corpus")
    generate_synthetic_corpus(GeneratorConfig(n_dialogues=24), seed=3, out_dir=out)
    return out


@pytest.fixture(scope="module")
def cli_checkpoint(tmp_path_factory, cli_corpus):
    out = tmp_path_factory.mktemp("cli-train")
    code = main(["train", "--corpus", str(cli_corpus), "--out", str(out),
                 "--strategy", "msp", "--epochs", "1", "--dim", "16",
                 "--max-len", "128", "--batch-size", "16", "--seed", "0"])
    assert code == 0
    return out / "checkpoint.pt"


def test_gen_data_writes_corpus(tmp_path):
    out = tmp_path / "corpus"
    code = main(["gen-data", "--out", str(out), "--n-dialogues", "12",
                 "--seed", "5"])
    assert code == 0
    for name in ("schema.json", "train.jsonl", "dev.jsonl", "test.jsonl",
                 "events.jsonl"):
        assert (out / name).exists()


def test_gen_data_same_seed_identical(tmp_path):
    for sub in ("a", "b"):
        assert main(["gen-data", "--out", str(tmp_path / sub),
                     "--n-dialogues", "10", "--seed", "9"]) == 0
    for name in ("train.jsonl", "dev.jsonl", "test.jsonl", "events.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == \
            (tmp_path / "b" / name).read_bytes()


def test_gen_data_bad_rate_exits_2(tmp_path, capsys):
    code = main(["gen-data", "--out", str(tmp_path), "--correction-rate", "2.0"])
    assert code == 2
    assert "error" in capsys.readouterr().err


def test_train_missing_corpus_exits_2(tmp_path):
    assert main(["train", "--corpus", str(tmp_path / "nope"),
                 "--out", str(tmp_path)]) == 2


def test_train_writes_history(cli_checkpoint):
    history = cli_checkpoint.parent / "history.jsonl"
    rows = [json.loads(line) for line in history.read_text().splitlines()]
    assert rows and set(rows[0]) == {"epoch", "train_loss", "dev_jga", "lr"}


def test_eval_writes_report_and_trace(tmp_path, cli_corpus, cli_checkpoint):
    out = tmp_path / "eval"
    code = main(["eval", "--checkpoint", str(cli_checkpoint),
                 "--corpus", str(cli_corpus), "--out", str(out)])
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    assert {"jga", "domain_jga", "slots", "turns", "inherit"} <= set(report)
    trace_rows = [json.loads(line)
                  for line in (out / "trace.jsonl").read_text().splitlines()]
    assert len(trace_rows) == report["turns"] * 8
    assert {"dialogue_id", "turn", "slot", "hit_type", "mention_index",
            "value", "disposition"} <= set(trace_rows[0])


def test_eval_missing_checkpoint_exits_2(tmp_path, cli_corpus):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.pt"),
                 "--corpus", str(cli_corpus)]) == 2


def test_analyze_reports_inherit_counters(tmp_path, cli_corpus, cli_checkpoint,
                                          capsys):
    out = tmp_path / "analysis"
    code = main(["analyze", "--checkpoint", str(cli_checkpoint),
                 "--corpus", str(cli_corpus), "--out", str(out),
                 "--forced-noise"])
    assert code == 0
    captured = capsys.readouterr().out
    assert "revision_success" in captured
    analysis = json.loads((out / "analysis.json").read_text())
    assert analysis["forced_noise"] is True
    assert "inherit" in analysis


def test_compare_table_shape(tmp_path, cli_corpus, capsys):
    out = tmp_path / "compare"
    code = main(["compare", "--corpus", str(cli_corpus), "--out", str(out),
                 "--epochs", "1", "--seeds", "0", "1",
                 "--strategies", "msp", "pure_context"])
    assert code == 0
    summary = json.loads((out / "compare.json").read_text())
    assert len(summary["rows"]) == 4
    assert set(summary["medians"]) == {"msp", "pure_context"}
    assert "med" in capsys.readouterr().out


def test_config_file_with_flag_override(tmp_path, cli_corpus):
    config = tmp_path / "run.json"
    config.write_text(json.dumps({"n_dialogues": 6, "seed": 4}))
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    assert main(["gen-data", "--config", str(config), "--out", str(out_a)]) == 0
    # the flag overrides the config file's seed
    assert main(["gen-data", "--config", str(config), "--out", str(out_b),
                 "--seed", "5"]) == 0
    assert (out_a / "train.jsonl").read_bytes() != \
        (out_b / "train.jsonl").read_bytes()


# ---------------------------------------------------------------------------
# repl
# ---------------------------------------------------------------------------

def _run_repl(monkeypatch, capsys, checkpoint, lines):
    feed = iter(lines)
    monkeypatch.setattr("builtins.input", lambda prompt="": next(feed))
    code = main(["repl", "--checkpoint", str(checkpoint)])
    return code, capsys.readouterr().out


def test_repl_quit_immediately(monkeypatch, capsys, cli_checkpoint):
    code, out = _run_repl(monkeypatch, capsys, cli_checkpoint, [":quit"])
    assert code == 0
    assert "tracking with strategy msp" in out


def test_repl_one_turn_prints_state(monkeypatch, capsys, cli_checkpoint):
    code, out = _run_repl(
        monkeypatch, capsys, cli_checkpoint,
        ["hello , how can i help you ?", "i need a train to london .", ":quit"])
    assert code == 0
    assert "turn 1 state:" in out


def test_repl_eof_exits_cleanly(monkeypatch, capsys, cli_checkpoint):
    def raise_eof(prompt=""):
        raise EOFError

    monkeypatch.setattr("builtins.input", raise_eof)
    assert main(["repl", "--checkpoint", str(cli_checkpoint)]) == 0


def test_repl_reset_clears_state(monkeypatch, capsys, cli_checkpoint):
    code, out = _run_repl(
        monkeypatch, capsys, cli_checkpoint,
        ["hello ?", "i need a train to london .", ":reset",
         "hello ?", "i need a train to ely .", ":quit"])
    assert code == 0
    assert "state cleared" in out
    assert out.count("turn 1 state:") == 2


def test_repl_matches_batch_eval(monkeypatch, capsys, tmp_path, cli_corpus,
                                 cli_checkpoint):
    import msp_dst.metrics as metrics
    from msp_dst.model import load_checkpoint
    from msp_dst.tracker import track_corpus
    from msp_dst.training import load_corpus_dir

    bundle = load_corpus_dir(cli_corpus)
    dialogue = bundle.test[0]
    lines = []
    for turn in dialogue.turns:
        lines.append(" ".join(turn.agent_tokens))
        lines.append(" ".join(turn.user_tokens))
    lines.append(":quit")
    code, out = _run_repl(monkeypatch, capsys, cli_checkpoint, lines)
    assert code == 0

    model = load_checkpoint(cli_checkpoint, schema=bundle.schema)
    result = track_corpus(model, [dialogue])
    final = result.states[dialogue.id][-1]
    non_none = {s: v for s, v in final.values.items() if v != "none"}
    tail = out.split(f"turn {len(dialogue.turns)} state:")[-1]
    for slot, value in non_none.items():
        assert f"{slot} = {value}" in tail
