import json

import httpx
import numpy as np
import pytest

from messplus.zoo import (ConfigError, EndpointConfig, LiveBackend, ModelProfile, ModelResult,
                          ScoringError, SynthModel, TraceBackend, TraceParseError, TraceRecord,
                          TraceSchemaError, TraceValidationError, TransportError, ZooQueryError,
                          cnn_dailymail_like, energy_estimate, fit_energy_profile, live_query,
                          load_trace, query_all, synth_trace, validate_zoo, wmt14_like, write_trace)


def _line(rid="r1", acc=(0.5, 0.6), names=("small", "large"), **extra):
    obj = {"request_id": rid, "text": "hello world", "reference": "hi",
           "models": [{"name": n, "accuracy": a, "energy_joules": 10.0 * (i + 1),
                       "latency_seconds": 0.1} for i, (n, a) in enumerate(zip(names, acc))]}
    obj.update(extra)
    return json.dumps(obj)


def test_load_empty(tmp_path):
    p = tmp_path / "t.jsonl"
    p.write_text("")
    assert load_trace(p) == []


def test_load_round_trip(tmp_path):
    p = tmp_path / "t.jsonl"
    p.write_text(_line("a") + "\n" + _line("b", acc=(0.25, 1.0)) + "\n")
    recs = load_trace(p)
    assert [r.request_id for r in recs] == ["a", "b"]
    assert recs[1].per_model[1] == ModelResult(1.0, 20.0, 0.1, None)
    assert recs[0].model_names == ["small", "large"]
    out = tmp_path / "out.jsonl"
    write_trace(recs, out)
    assert load_trace(out) == recs
    assert [json.loads(x) for x in out.read_text().splitlines()] == \
        [json.loads(x) for x in p.read_text().splitlines()]


def test_load_accuracy_out_of_range(tmp_path):
    p = tmp_path / "t.jsonl"
    p.write_text(_line("a") + "\n" + _line("b", acc=(1.2, 0.5)) + "\n")
    with pytest.raises(TraceValidationError, match=r"line 2.*accuracy"):
        load_trace(p)


def test_load_malformed_line(tmp_path):
    p = tmp_path / "t.jsonl"
    p.write_text(_line() + "\n{not json\n")
    with pytest.raises(TraceParseError, match="line 2"):
        load_trace(p)


def test_load_inconsistent_model_count(tmp_path):
    p = tmp_path / "t.jsonl"
    p.write_text(_line() + "\n" + _line(acc=(0.5,), names=("small",)) + "\n")
    with pytest.raises(TraceSchemaError, match="line 2"):
        load_trace(p)


def test_load_missing_field(tmp_path):
    p = tmp_path / "t.jsonl"
    obj = json.loads(_line())
    del obj["reference"]
    p.write_text(json.dumps(obj) + "\n")
    with pytest.raises(TraceSchemaError):
        load_trace(p)


def test_energy_estimate_examples():
    assert energy_estimate(ModelProfile("z", 0), 123, 456) == 0.0
    assert energy_estimate(ModelProfile("m", 0, 10, 0.5, 2), 100, 20) == pytest.approx(100.0, abs=1e-9)


def test_profile_rejects_negative():
    with pytest.raises(ConfigError):
        ModelProfile("m", 0, energy_base=-1)


def test_validate_zoo_ranks():
    validate_zoo([ModelProfile("a", 1), ModelProfile("b", 0)])
    with pytest.raises(ConfigError):
        validate_zoo([ModelProfile("a", 0), ModelProfile("b", 2)])


def test_fit_energy_profile_recovers_coefficients():
    rng = np.random.default_rng(0)
    n_in = rng.integers(10, 500, 2000)
    n_out = rng.integers(5, 300, 2000)
    joules = 25.0 + 0.8 * n_in + 3.5 * n_out + rng.normal(0, 5.0, 2000)
    prof = fit_energy_profile("m", 0, n_in, n_out, joules)
    assert prof.energy_base == pytest.approx(25.0, rel=0.05)
    assert prof.energy_per_input_token == pytest.approx(0.8, rel=0.05)
    assert prof.energy_per_output_token == pytest.approx(3.5, rel=0.05)


def test_synth_empty():
    assert synth_trace(wmt14_like(0), seed=1) == []


@pytest.mark.parametrize("factory", [wmt14_like, cnn_dailymail_like])
def test_synth_means_track_targets(factory):
    cfg = factory(5000)
    recs = synth_trace(cfg, seed=3)
    for m, model in enumerate(cfg.models):
        acc = np.mean([r.per_model[m].accuracy for r in recs])
        energy = np.mean([r.per_model[m].energy_joules for r in recs])
        assert acc == pytest.approx(model.mean_accuracy, rel=0.02)
        assert energy == pytest.approx(model.mean_energy_joules, rel=0.02)
    means = [np.mean([r.per_model[m].accuracy for r in recs]) for m in range(2)]
    assert means[0] <= means[1]


def test_synth_deterministic():
    a, b = synth_trace(wmt14_like(200), seed=5), synth_trace(wmt14_like(200), seed=5)
    assert a == b
    assert a != synth_trace(wmt14_like(200), seed=6)


def test_synth_records_valid():
    for r in synth_trace(wmt14_like(300), seed=0):
        assert all(0 <= x.accuracy <= 1 and x.energy_joules >= 0 and x.latency_seconds >= 0
                   for x in r.per_model)
        assert r.text


def test_synth_text_carries_difficulty_signal():
    # Requests sharing a word should have correlated accuracies; check that
    # the small model's accuracy is predictable from the text at all.
    recs = synth_trace(wmt14_like(3000), seed=0)
    by_word = {}
    for r in recs:
        for w in set(r.text.split()):
            by_word.setdefault(w, []).append(r.per_model[0].accuracy)
    spread = np.std([np.mean(v) for v in by_word.values() if len(v) >= 30])
    assert spread > 0.05


def test_synth_rejects_non_monotone_means():
    cfg = wmt14_like(10)
    cfg.models = [SynthModel("big-but-bad", 0.6, 10.0), SynthModel("small-but-good", 0.4, 500.0)]
    with pytest.raises(ConfigError):
        synth_trace(cfg)


def _record(energies=(44.639, 527.870)):
    return TraceRecord("r", "x", "ref",
                       [ModelResult(0.5, e, 0.1 * (i + 1)) for i, e in enumerate(energies)],
                       [f"m{i}" for i in range(len(energies))])


def test_query_all_trace_mode():
    rec = _record()
    results = query_all(TraceBackend(2), rec)
    assert results == rec.per_model
    assert sum(r.energy_joules for r in results) == pytest.approx(572.509, abs=1e-9)
    assert query_all(TraceBackend(2), rec, parallel=True) == results
    single = _record((12.0,))
    assert query_all(TraceBackend(1), single) == [TraceBackend(1).query(0, single)]


def test_query_all_reports_failing_model():
    class Flaky(TraceBackend):
        def query(self, m, record):
            if m == 1:
                raise OSError("boom")
            return super().query(m, record)

    with pytest.raises(ZooQueryError) as info:
        query_all(Flaky(2), _record())
    assert info.value.model_index == 1


# --- live mode against an in-process stub ----------------------------------

def _client(handler):
    return httpx.Client(transport=httpx.MockTransport(handler))


def _reply(content, usage=None):
    body = {"choices": [{"message": {"role": "assistant", "content": content}}]}
    if usage:
        body["usage"] = usage
    return httpx.Response(200, json=body)


ENDPOINT = EndpointConfig("http://stub.local/v1", api_key_env="STUB_KEY", max_retries=2,
                          backoff_seconds=0.01)


@pytest.mark.parametrize("scorer", ["bleu1", "rouge1"])
def test_live_echo_scores_one(scorer):
    ref = "the cat sat on the mat"
    res = live_query(ENDPOINT, "m", "translate", ref, scorer, client=_client(lambda r: _reply(ref)))
    assert res.accuracy == 1.0 and res.output_text == ref and res.latency_seconds >= 0


def test_live_empty_output_scores_zero():
    res = live_query(ENDPOINT, "m", "p", "some reference", client=_client(lambda r: _reply("")))
    assert res.accuracy == 0.0


def test_live_energy_from_usage():
    prof = ModelProfile("m", 0, 10, 0.5, 2)
    handler = lambda r: _reply("x", {"prompt_tokens": 100, "completion_tokens": 20})
    res = live_query(ENDPOINT, "m", "p", "x", profile=prof, client=_client(handler))
    assert res.energy_joules == pytest.approx(100.0)


def test_live_energy_falls_back_to_local_counts():
    prof = ModelProfile("m", 0, 0, 1.0, 10.0)
    res = live_query(ENDPOINT, "m", "one two three", "a b", profile=prof,
                     client=_client(lambda r: _reply("a b")))
    assert res.energy_joules == pytest.approx(3 + 20)


def test_live_request_shape(monkeypatch):
    monkeypatch.setenv("STUB_KEY", "sekrit")
    seen = {}

    def handler(request):
        seen["url"] = str(request.url)
        seen["auth"] = request.headers.get("authorization")
        seen["body"] = json.loads(request.content)
        return _reply("ok")

    live_query(ENDPOINT, "tiny", "hello", "ok", client=_client(handler))
    assert seen["url"] == "http://stub.local/v1/chat/completions"
    assert seen["auth"] == "Bearer sekrit"
    assert seen["body"]["model"] == "tiny"
    assert seen["body"]["messages"] == [{"role": "user", "content": "hello"}]


def test_live_retries_then_succeeds():
    calls, sleeps = [], []

    def handler(request):
        calls.append(1)
        return httpx.Response(503) if len(calls) < 3 else _reply("fine")

    res = live_query(ENDPOINT, "m", "p", "fine", client=_client(handler), sleep=sleeps.append)
    assert res.accuracy == 1.0
    assert sleeps == [0.01, 0.02]


def test_live_gives_up_with_transport_error():
    sleeps = []
    with pytest.raises(TransportError):
        live_query(ENDPOINT, "m", "p", "r", client=_client(lambda r: httpx.Response(500)),
                   sleep=sleeps.append)
    assert len(sleeps) == ENDPOINT.max_retries


def test_live_unparsable_body():
    handler = lambda r: httpx.Response(200, text="<html>")
    with pytest.raises(TransportError):
        live_query(ENDPOINT, "m", "p", "r", client=_client(handler), sleep=lambda s: None)


def test_live_missing_reference():
    with pytest.raises(ScoringError):
        live_query(ENDPOINT, "m", "p", None, client=_client(lambda r: _reply("x")))


def test_live_backend_query_all():
    profiles = [ModelProfile("big", 1, 100.0), ModelProfile("small", 0, 1.0)]

    def handler(request):
        model = json.loads(request.content)["model"]
        return _reply("a b" if model == "small" else "a b c d")

    backend = LiveBackend(ENDPOINT, profiles, client=_client(handler))
    rec = TraceRecord("r", "prompt", "a b c d", [], [])
    results = query_all(backend, rec)
    assert [r.energy_joules for r in results] == [1.0, 100.0]
    assert results[1].accuracy == 1.0 and results[0].accuracy < 1.0
