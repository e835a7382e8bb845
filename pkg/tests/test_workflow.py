"""Template validation and config plumbing."""

from teola_sim.engines import load_profiles
from teola_sim.workflow import Component, QueryConfig, WorkflowTemplate, validate_template
from teola_sim.workloads import AppKind, build_app_template


def small_template(edges=(("a", "b"),)):
    return WorkflowTemplate(
        name="t",
        components=(
            Component("a", "query-embedding", "embed0",
                      in_kwargs=("question",), out_kwargs=("query_vectors",)),
            Component("b", "search", "vdb-search0",
                      in_kwargs=("query_vectors",), out_kwargs=("chunks",),
                      params={"per_query_top_k": 3}),
        ),
        edges=tuple(edges),
        source_keys=("question",),
    )


class TestValidateTemplate:
    def test_cycle_reported_once(self):
        t = small_template(edges=(("a", "b"), ("b", "a")))
        report = validate_template(t)
        assert not report
        assert sum("cycle" in v for v in report.violations) == 1

    def test_builtin_naive_rag_is_clean(self):
        profiles = load_profiles("default")
        report = validate_template(build_app_template(AppKind.NAIVE_RAG_QA), profiles)
        assert report.violations == []

    def test_unknown_engine_reported(self):
        t = WorkflowTemplate(
            name="t",
            components=(
                Component("a", "query-embedding", "gpu-x",
                          in_kwargs=("question",), out_kwargs=("v",)),
            ),
            edges=(),
            source_keys=("question",),
        )
        report = validate_template(t, load_profiles("default"))
        assert any("gpu-x" in v for v in report.violations)

    def test_unknown_engine_ok_without_registry(self):
        t = small_template()
        assert validate_template(t)  # no registry: bindings unchecked

    def test_dangling_edge_name(self):
        t = small_template(edges=(("a", "nope"),))
        assert any("nope" in v for v in validate_template(t).violations)

    def test_missing_input_producer(self):
        t = WorkflowTemplate(
            name="t",
            components=(
                Component("b", "search", "vdb-search0",
                          in_kwargs=("query_vectors",), out_kwargs=("chunks",),
                          params={"per_query_top_k": 3}),
            ),
            edges=(),
            source_keys=(),
        )
        assert any("query_vectors" in v for v in validate_template(t).violations)

    def test_bad_synthesis_mode(self):
        t = WorkflowTemplate(
            name="t",
            components=(
                Component("s", "llm-synthesize", "llm0",
                          in_kwargs=("question",), out_kwargs=("answer",),
                          params={"synthesis_mode": "psychic"}),
            ),
            edges=(),
            source_keys=("question",),
        )
        assert any("psychic" in v for v in validate_template(t).violations)

    def test_every_builtin_template_is_clean(self):
        profiles = load_profiles("default")
        for kind in AppKind:
            report = validate_template(build_app_template(kind), profiles)
            assert report.violations == [], (kind, report.violations)


class TestQueryConfig:
    def test_component_params_merge_over_defaults(self):
        t = small_template()
        cfg = QueryConfig(params={"b": {"per_query_top_k": 7}})
        merged = cfg.for_component(t.component("b"))
        assert merged["per_query_top_k"] == 7

    def test_canonical_excludes_query_id(self):
        a = QueryConfig(query_id="q1", params={"x": {"y": 1}})
        b = QueryConfig(query_id="q2", params={"x": {"y": 1}})
        assert a.canonical() == b.canonical()
        assert a.canonical(with_query_id=True) != b.canonical(with_query_id=True)

    def test_round_trip(self):
        cfg = QueryConfig(query_id="q9", app_id="app1", params={"c": {"k": 3}})
        assert QueryConfig.loads(cfg.dumps()).to_dict() == cfg.to_dict()

    def test_template_round_trip(self):
        t = build_app_template(AppKind.ADVANCED_RAG_QA)
        back = WorkflowTemplate.loads(t.dumps())
        assert back.to_dict() == t.to_dict()
