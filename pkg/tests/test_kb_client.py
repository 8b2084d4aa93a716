import pytest

from ktg.kb_client import (FailingBackend, FixtureBackend, KBClient, NotFoundError, TransportError,
                           WikidataBackend, enrich_record)


def test_fixture_entity_lebron(toy_kb_dir, tmp_path):
    client = KBClient(FixtureBackend(toy_kb_dir), tmp_path)
    aux = client.enrich_entity("Q36159")
    assert aux.description == ("american", "basketball", "player")
    assert aux.domain == ("human",)
    assert aux.source == "fixture"


def test_second_call_hits_cache(toy_kb_dir, tmp_path):
    client = KBClient(FixtureBackend(toy_kb_dir), tmp_path)
    first = client.enrich_entity("Q36159")
    second = client.enrich_entity("Q36159")
    assert second.source == "cache"
    assert (second.description, second.domain) == (first.description, first.domain)


def test_warm_cache_serves_failing_backend(toy_kb_dir, tmp_path):
    warm = KBClient(FixtureBackend(toy_kb_dir), tmp_path)
    first = warm.enrich_entity("Q36159")
    path = warm.enrich_relation("place_of_death")
    cold = KBClient(FailingBackend(), tmp_path)
    assert cold.enrich_entity("Q36159").to_json() == first.to_json()
    assert cold.enrich_relation("place_of_death") == path


def test_failing_backend_without_cache(tmp_path):
    with pytest.raises(TransportError):
        KBClient(FailingBackend(), tmp_path).enrich_entity("Q1")


def test_unknown_and_invalid_ids(toy_kb_dir):
    client = KBClient(FixtureBackend(toy_kb_dir))
    with pytest.raises(NotFoundError):
        client.enrich_entity("Q999999999")
    with pytest.raises(NotFoundError):
        client.enrich_entity("../etc/passwd")
    with pytest.raises(NotFoundError):
        KBClient(WikidataBackend(get=_never)).enrich_entity("not-an-id")


def test_relation_hierarchy_place_of_death(toy_kb_dir):
    client = KBClient(FixtureBackend(toy_kb_dir))
    assert client.enrich_relation("place_of_death") == ["root", "people", "deceased_person", "place_of_death"]


def test_relation_without_hierarchy_falls_back(tmp_path):
    (tmp_path / "kb").mkdir()
    (tmp_path / "kb" / "works_for.json").write_text('{"surface": "works for"}')
    client = KBClient(FixtureBackend(tmp_path / "kb"))
    assert client.enrich_relation("works_for") == ["root", "works_for"]


def test_relations_share_prefix(toy_kb_dir):
    client = KBClient(FixtureBackend(toy_kb_dir))
    a = client.enrich_relation("place_of_death")
    b = client.enrich_relation("spouse")
    assert a[:2] == b[:2] == ["root", "people"]


def test_cache_dir_from_env(monkeypatch, toy_kb_dir, tmp_path):
    monkeypatch.setenv("KTG_CACHE_DIR", str(tmp_path / "c"))
    KBClient(FixtureBackend(toy_kb_dir)).enrich_entity("Q36159")
    assert (tmp_path / "c" / "entity-Q36159.json").is_file()
    assert not list((tmp_path / "c").glob(".tmp-*"))


def test_enrich_record_lebron(toy_kb_dir, lebron_record):
    out = enrich_record(lebron_record, KBClient(FixtureBackend(toy_kb_dir)))
    assert out["entities"][0]["description"] == "american basketball player"
    assert out["entities"][0]["domain"] == "human"
    assert out["relations"][1]["hierarchy"][0] == "root"


def test_enrich_record_missing_knowledge_is_empty(tmp_path, caplog):
    rec = {"entities": [{"id": "Q1", "label": "a"}, {"id": "Q2", "label": "b"}],
           "relations": [{"id": "r"}], "question": ["who"]}
    out = enrich_record(rec, KBClient(FailingBackend(), tmp_path))
    assert out["entities"][0]["description"] == ""
    assert "no auxiliary knowledge" in caplog.text
    with pytest.raises(TransportError):
        enrich_record(rec, KBClient(FailingBackend(), tmp_path), strict=True)


def _never(url, params):
    raise AssertionError("network must not be touched")


class FakeWikidata:
    """Canned wbgetentities responses keyed by id."""

    def __init__(self):
        self.calls = []
        self.entities = {
            "Q36159": {"labels": {"en": {"value": "LeBron James"}},
                       "descriptions": {"en": {"value": "American basketball player"}},
                       "claims": {"P31": [{"mainsnak": {"datavalue": {"value": {"id": "Q5"}}}}]}},
            "Q5": {"labels": {"en": {"value": "human"}}},
            "P20": {"labels": {"en": {"value": "place of death"}},
                    "claims": {"P1647": [{"mainsnak": {"datavalue": {"value": {"id": "P9000"}}}}]}},
            "P9000": {"labels": {"en": {"value": "deceased person"}},
                      "claims": {"P1647": [{"mainsnak": {"datavalue": {"value": {"id": "P9001"}}}}]}},
            "P9001": {"labels": {"en": {"value": "people"}}},
        }

    def __call__(self, url, params):
        self.calls.append(params["ids"])
        ent = self.entities.get(params["ids"], {"missing": ""})
        return {"entities": {params["ids"]: ent}}


def test_wikidata_entity_and_cache(tmp_path):
    fake = FakeWikidata()
    client = KBClient(WikidataBackend(get=fake), tmp_path)
    aux = client.enrich_entity("Q36159")
    assert (aux.description, aux.domain, aux.source) == (("american", "basketball", "player"), ("human",), "live")
    n = len(fake.calls)
    assert client.enrich_entity("Q36159").source == "cache"
    assert len(fake.calls) == n


def test_wikidata_relation_hierarchy():
    client = KBClient(WikidataBackend(get=FakeWikidata()))
    assert client.enrich_relation("P20") == ["root", "people", "deceased_person", "place_of_death"]


def test_wikidata_missing_entity():
    with pytest.raises(NotFoundError):
        KBClient(WikidataBackend(get=FakeWikidata())).enrich_entity("Q424242")
