"""Runner behavior: stage wiring, fallbacks, determinism, caching, replay."""

from __future__ import annotations

import json

import pytest

from rethink.backends import (
    ROLE_ANSWERER,
    ROLE_CAPTIONER,
    ROLE_REASONER,
    replay_backends,
)
from rethink.core import ImageRef, MatrixIqInstance, QaInstance, STAGE_OBSERVE, STAGE_RETHINK, STAGE_THINK
from rethink.datasets import DatasetManifest, load_matrix, load_qa, trace_to_json
from rethink.errors import ConfigError
from rethink.pipeline import (
    FALLBACK_ANSWER_WITHOUT_RATIONALE,
    RunConfig,
    Runner,
    config_digest,
)
from rethink.prompts import render_rethinking, render_thinking_qa

from conftest import (
    PNG_BYTES,
    build_matrix_corpus,
    build_qa_corpus,
    make_run_config,
    scripted_backends_from_entries,
)


def _load_corpus_instances(corpus):
    manifest = DatasetManifest(
        name="toy", format="unified_jsonl", root=str(corpus.jsonl_path)
    )
    return load_qa(manifest)


def _runner_for(corpus, **config_overrides):
    config = make_run_config(script=str(corpus.script_path), **config_overrides)
    return Runner(config)


# -- happy path -------------------------------------------------------------------


def test_run_qa_produces_three_stage_trace(tmp_path):
    corpus = build_qa_corpus(tmp_path / "data", count=4)
    runner = _runner_for(corpus)
    instance = _load_corpus_instances(corpus)[0]
    trace = runner.run_qa(instance)
    assert trace.failure is None
    assert [record.stage for record in trace.records] == [
        STAGE_OBSERVE,
        STAGE_THINK,
        STAGE_RETHINK,
    ]
    assert trace.final.raw == corpus.expected_answer[instance.instance_id]
    assert trace.config_digest == config_digest(runner.config)
    observe, think, rethink = trace.records
    assert observe.image_id == instance.image.id
    assert think.image_id is None
    assert rethink.image_id == instance.image.id
    assert observe.backend_id == f"{ROLE_CAPTIONER}-scripted"
    assert think.backend_id == f"{ROLE_REASONER}-scripted"
    assert rethink.backend_id == f"{ROLE_ANSWERER}-scripted"
    # the think prompt embeds the observed caption
    assert observe.completion in think.prompt.rendered
    assert think.prompt.filled_slots["caption"] == observe.completion


def test_run_many_is_deterministic(tmp_path):
    corpus = build_qa_corpus(tmp_path / "data", count=6)
    instances = _load_corpus_instances(corpus)
    first = _runner_for(corpus).run_many(instances)
    second = _runner_for(corpus).run_many(instances)
    assert first == second
    assert [trace_to_json(t) for t in first] == [trace_to_json(t) for t in second]


def test_concurrency_does_not_change_results(tmp_path):
    corpus = build_qa_corpus(tmp_path / "data", count=8)
    instances = _load_corpus_instances(corpus)
    serial = _runner_for(corpus, concurrency_limit=1).run_many(instances)
    threaded = _runner_for(corpus, concurrency_limit=4).run_many(instances)
    assert [t.instance_id for t in threaded] == [i.instance_id for i in instances]
    # concurrency_limit is part of the config digest, so compare the work itself
    assert [(t.records, t.final, t.failure) for t in serial] == [
        (t.records, t.final, t.failure) for t in threaded
    ]


# -- stage failures ------------------------------------------------------------------


def test_observe_failure_yields_failure_trace(tmp_path):
    corpus = build_qa_corpus(tmp_path / "data", count=4, fail_observe=(1,))
    instances = _load_corpus_instances(corpus)
    traces = _runner_for(corpus).run_many(instances)
    failed = traces[1]
    assert failed.failure is not None and failed.failure.startswith("observe:")
    assert failed.final is None
    assert len(failed.records) == 1
    assert failed.records[0].error is not None
    assert failed.records[0].completion == ""
    # the rest of the batch is unaffected
    assert sum(1 for t in traces if t.failure is None) == 3


def test_think_failure_without_fallback(tmp_path):
    corpus = build_qa_corpus(tmp_path / "data", count=4, fail_think=(2,))
    instances = _load_corpus_instances(corpus)
    traces = _runner_for(corpus).run_many(instances)
    failed = traces[2]
    assert failed.failure.startswith("think:")
    assert [record.stage for record in failed.records] == [STAGE_OBSERVE, STAGE_THINK]
    assert failed.records[1].error is not None


def test_empty_caption_retried_once_then_fails(tmp_path):
    image_path = tmp_path / "img.png"
    image_path.write_bytes(PNG_BYTES)
    instance = QaInstance(
        instance_id="q1",
        image=ImageRef(id="img-1", locator=str(image_path)),
        question="what is this?",
    )
    backends = scripted_backends_from_entries(
        [{"role": ROLE_CAPTIONER, "prompt": "", "image_id": "img-1", "completion": "   "}]
    )
    runner = Runner(make_run_config(), backends=backends)
    trace = runner.run_qa(instance)
    assert backends[ROLE_CAPTIONER].calls == 2  # one retry for the empty caption
    assert trace.failure.startswith("observe:")
    assert "EmptyCompletionError" in trace.failure


def test_fallback_answers_from_caption_when_reasoner_is_down(tmp_path):
    image_path = tmp_path / "img.png"
    image_path.write_bytes(PNG_BYTES)
    instance = QaInstance(
        instance_id="q1",
        image=ImageRef(id="img-1", locator=str(image_path)),
        question="what animal is this?",
    )
    caption = "a zebra grazing near a fence"
    backends = scripted_backends_from_entries(
        [
            {"role": ROLE_CAPTIONER, "prompt": "", "image_id": "img-1", "completion": caption},
            # no reasoner entry: thinking fails
            {
                "role": ROLE_ANSWERER,
                "prompt": render_rethinking(instance.question, caption).rendered,
                "image_id": "img-1",
                "completion": "zebra",
            },
        ]
    )
    runner = Runner(
        make_run_config(fallback_policy=FALLBACK_ANSWER_WITHOUT_RATIONALE),
        backends=backends,
    )
    trace = runner.run_qa(instance)
    assert trace.failure is None
    assert trace.final.raw == "zebra"
    stages = [record.stage for record in trace.records]
    assert stages == [STAGE_OBSERVE, STAGE_THINK, STAGE_RETHINK]
    think = trace.records[1]
    assert think.error is not None and think.completion == ""
    # the caption stands in for the missing rationale
    assert trace.records[2].prompt.filled_slots["rationale"] == caption


def test_llm_shortcut_skips_answerer(tmp_path):
    corpus = build_qa_corpus(tmp_path / "data", count=4)
    backends = scripted_backends_from_entries(corpus.script_entries)
    runner = Runner(make_run_config(llm_shortcut=True), backends=backends)
    instances = _load_corpus_instances(corpus)
    traces = runner.run_many(instances)
    assert backends[ROLE_ANSWERER].calls == 0
    for trace in traces:
        assert trace.failure is None
        assert trace.final.raw == corpus.expected_answer[trace.instance_id]
        rethink = trace.records[-1]
        assert rethink.stage == STAGE_RETHINK
        assert rethink.backend_id == f"{ROLE_REASONER}-scripted"  # synthesized, not the answerer
        assert rethink.latency_ms == 0


def test_multiple_choice_sets_chosen_index(tmp_path):
    image_path = tmp_path / "img.png"
    image_path.write_bytes(PNG_BYTES)
    instance = QaInstance(
        instance_id="q1",
        image=ImageRef(id="img-1", locator=str(image_path)),
        question="which animal?",
        choices=("horse", "zebra", "mule"),
        gold_choice_index=1,
    )
    caption = "a striped animal"
    completion = "Stripes mean zebra. So the answer is zebra."
    rationale = "Stripes mean zebra."
    backends = scripted_backends_from_entries(
        [
            {"role": ROLE_CAPTIONER, "prompt": "", "image_id": "img-1", "completion": caption},
            {
                "role": ROLE_REASONER,
                "prompt": render_thinking_qa(caption, instance.question).rendered,
                "completion": completion,
            },
            {
                "role": ROLE_ANSWERER,
                "prompt": render_rethinking(instance.question, rationale).rendered,
                "image_id": "img-1",
                "completion": "zebra",
            },
        ]
    )
    trace = Runner(make_run_config(), backends=backends).run_qa(instance)
    assert trace.final.chosen_index == 1


def test_validation_failure_becomes_trace(tmp_path):
    image_path = tmp_path / "img.png"
    image_path.write_bytes(PNG_BYTES)
    bad = QaInstance(
        instance_id="q1",
        image=ImageRef(id="img-1", locator=str(image_path)),
        question="  padded?  ",
    )
    corpus = build_qa_corpus(tmp_path / "data", count=1)
    (trace,) = _runner_for(corpus).run_many([bad])
    assert trace.failure.startswith("validation:")
    assert "whitespace" in trace.failure
    assert trace.records == ()
    assert trace.final is None


# -- sequence tasks --------------------------------------------------------------------


def test_run_matrix_trace_shape_and_choice(tmp_path):
    corpus = build_matrix_corpus(tmp_path / "matrix", tasks=4, correct=(0, 2))
    config = make_run_config(script=str(corpus.script_path))
    runner = Runner(config)
    instances = load_matrix(
        DatasetManifest(name="m", format="matrix_dir", root=str(corpus.root))
    )
    for instance in instances:
        trace, chosen = runner.run_matrix(instance)
        assert trace.failure is None
        stages = [record.stage for record in trace.records]
        assert stages == [STAGE_OBSERVE] * 9 + [STAGE_THINK]  # 3 contexts + 6 candidates
        assert chosen == corpus.expected_choice[instance.instance_id]
        assert trace.final.chosen_index == chosen
        # context images captioned before candidates, in order
        observed_ids = [record.image_id for record in trace.records[:9]]
        assert observed_ids == [ref.id for ref in (*instance.context_images, *instance.candidate_images)]


def test_matrix_similarity_tie_breaks_low(tmp_path):
    task_dir = tmp_path / "t0"
    task_dir.mkdir()
    refs = {}
    for name in ("c1", "c2", "a1", "a2", "a3"):
        path = task_dir / f"{name}.png"
        path.write_bytes(PNG_BYTES + name.encode())
        refs[name] = ImageRef(id=f"t0/{name}", locator=str(path))
    instance = MatrixIqInstance(
        instance_id="t0",
        context_images=(refs["c1"], refs["c2"]),
        candidate_images=(refs["a1"], refs["a2"], refs["a3"]),
    )
    entries = [
        {"role": ROLE_CAPTIONER, "prompt": "", "image_id": "t0/c1", "completion": "one dot"},
        {"role": ROLE_CAPTIONER, "prompt": "", "image_id": "t0/c2", "completion": "two dots"},
        # a2 and a3 tie exactly; a1 is a clear miss
        {"role": ROLE_CAPTIONER, "prompt": "", "image_id": "t0/a1", "completion": "a blank square"},
        {"role": ROLE_CAPTIONER, "prompt": "", "image_id": "t0/a2", "completion": "three dots"},
        {"role": ROLE_CAPTIONER, "prompt": "", "image_id": "t0/a3", "completion": "three dots"},
    ]
    from rethink.prompts import render_thinking_matrix

    entries.append(
        {
            "role": ROLE_REASONER,
            "prompt": render_thinking_matrix(["one dot", "two dots"]).rendered,
            "completion": "three dots",
        }
    )
    backends = scripted_backends_from_entries(entries)
    _, chosen = Runner(make_run_config(), backends=backends).run_matrix(instance)
    assert chosen == 1  # first of the tied pair


def test_matrix_think_failure(tmp_path):
    task_dir = tmp_path / "t0"
    task_dir.mkdir()
    refs = {}
    for name in ("c1", "c2", "a1", "a2"):
        path = task_dir / f"{name}.png"
        path.write_bytes(PNG_BYTES)
        refs[name] = ImageRef(id=f"t0/{name}", locator=str(path))
    instance = MatrixIqInstance(
        instance_id="t0",
        context_images=(refs["c1"], refs["c2"]),
        candidate_images=(refs["a1"], refs["a2"]),
    )
    entries = [
        {"role": ROLE_CAPTIONER, "prompt": "", "image_id": f"t0/{n}", "completion": "dots"}
        for n in ("c1", "c2", "a1", "a2")
    ]
    backends = scripted_backends_from_entries(entries)
    trace, chosen = Runner(make_run_config(), backends=backends).run_matrix(instance)
    assert chosen is None
    assert trace.failure.startswith("think:")
    assert len(trace.records) == 5  # 4 observations + the failed think


# -- caching and replay ------------------------------------------------------------------


def test_cache_makes_second_run_call_free(tmp_path):
    corpus = build_qa_corpus(tmp_path / "data", count=4)
    instances = _load_corpus_instances(corpus)
    cache_dir = tmp_path / "cache"
    config = make_run_config(cache_enabled=True, cache_dir=str(cache_dir))

    first_backends = scripted_backends_from_entries(corpus.script_entries)
    first = Runner(config, backends=first_backends).run_many(instances)
    assert all(backend.calls > 0 for backend in first_backends.values())

    second_backends = scripted_backends_from_entries(corpus.script_entries)
    second = Runner(config, backends=second_backends).run_many(instances)
    assert all(backend.calls == 0 for backend in second_backends.values())
    assert [t.final for t in second] == [t.final for t in first]
    assert all(record.cache_hit for t in second for record in t.records)


def test_replay_reproduces_qa_run(tmp_path):
    corpus = build_qa_corpus(tmp_path / "data", count=3)
    instances = _load_corpus_instances(corpus)
    runner = _runner_for(corpus)
    for instance in instances:
        trace = runner.run_qa(instance)
        replayed = Runner(make_run_config(), backends=replay_backends(trace)).run_qa(instance)
        assert replayed.final == trace.final
        assert [r.completion for r in replayed.records] == [r.completion for r in trace.records]
        assert replayed.records[0].backend_id == trace.records[0].backend_id


def test_replay_reproduces_matrix_run(tmp_path):
    corpus = build_matrix_corpus(tmp_path / "matrix", tasks=2, correct=(0,))
    runner = Runner(make_run_config(script=str(corpus.script_path)))
    instances = load_matrix(
        DatasetManifest(name="m", format="matrix_dir", root=str(corpus.root))
    )
    for instance in instances:
        trace, chosen = runner.run_matrix(instance)
        replay_runner = Runner(make_run_config(), backends=replay_backends(trace))
        replayed, rechosen = replay_runner.run_matrix(instance)
        assert rechosen == chosen
        assert replayed.final == trace.final


# -- config ---------------------------------------------------------------------------------


def test_config_digest_is_stable_and_sensitive():
    base = make_run_config()
    assert config_digest(base) == config_digest(make_run_config())
    assert config_digest(base) != config_digest(make_run_config(llm_shortcut=True))
    assert config_digest(base) != config_digest(make_run_config(caption_instruction="Describe."))
    assert config_digest(base) != config_digest(make_run_config(concurrency_limit=2))


def test_run_config_validation(tmp_path):
    with pytest.raises(ConfigError):
        make_run_config(backends={})
    good = make_run_config()
    with pytest.raises(ConfigError):
        RunConfig(
            backends={
                ROLE_CAPTIONER: good.backends[ROLE_REASONER],  # role mismatch
                ROLE_REASONER: good.backends[ROLE_REASONER],
                ROLE_ANSWERER: good.backends[ROLE_ANSWERER],
            },
            cache_enabled=False,
        )
    with pytest.raises(ConfigError):
        make_run_config(demo_count=2)  # no demo_source
    with pytest.raises(ConfigError):
        make_run_config(concurrency_limit=0)
    with pytest.raises(ConfigError):
        make_run_config(fallback_policy="improvize")
    with pytest.raises(ConfigError):
        Runner(make_run_config(), backends={ROLE_CAPTIONER: object()})


def _write_demo_file(path, count=3):
    rows = [
        {
            "id": f"d{i}",
            "image": f"/data/d{i}.png",
            "question": f"what is in demo {i}?",
            "caption": f"demo scene {i}",
            "rationale": f"the scene clearly shows item {i}",
            "answer": f"item {i}",
        }
        for i in range(count)
    ]
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return path


def test_demos_load_from_rationale_file(tmp_path):
    demo_path = _write_demo_file(tmp_path / "demos.jsonl")
    runner = Runner(
        make_run_config(demo_count=2, demo_source=str(demo_path)),
        backends=scripted_backends_from_entries([]),
    )
    assert len(runner.demos) == 2
    assert runner.demos[0].caption == "demo scene 0"
    assert runner.demos[1].answer == "item 1"


def test_demos_change_the_think_prompt(tmp_path):
    corpus = build_qa_corpus(tmp_path / "data", count=1)
    demo_path = _write_demo_file(tmp_path / "demos.jsonl", count=1)
    runner = Runner(
        make_run_config(demo_count=1, demo_source=str(demo_path)),
        backends=scripted_backends_from_entries(corpus.script_entries),
    )
    instance = _load_corpus_instances(corpus)[0]
    trace = runner.run_qa(instance)
    # corpus scripts were built for the zero-demo prompt, so thinking now misses
    assert trace.failure is not None and trace.failure.startswith("think:")
    think = trace.records[-1]
    assert "demo scene 0" in think.prompt.rendered
    assert think.prompt.filled_slots["demo0.caption"] == "demo scene 0"


def test_too_few_demos_is_config_error(tmp_path):
    demo_path = _write_demo_file(tmp_path / "demos.jsonl", count=1)
    with pytest.raises(ConfigError) as excinfo:
        Runner(
            make_run_config(demo_count=3, demo_source=str(demo_path)),
            backends=scripted_backends_from_entries([]),
        )
    assert "1 records" in str(excinfo.value)


def test_blank_demo_field_is_config_error(tmp_path):
    path = tmp_path / "demos.jsonl"
    row = {
        "id": "d0",
        "image": "/x.png",
        "question": "q?",
        "caption": "c",
        "rationale": "   ",
        "answer": "a",
    }
    path.write_text(json.dumps(row) + "\n", encoding="utf-8")
    with pytest.raises(ConfigError) as excinfo:
        Runner(
            make_run_config(demo_count=1, demo_source=str(path)),
            backends=scripted_backends_from_entries([]),
        )
    assert "d0" in str(excinfo.value)
