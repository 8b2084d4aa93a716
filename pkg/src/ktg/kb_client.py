"""Auxiliary knowledge lookup (entity description/domain, relation hierarchy).

Three backends share one interface: live Wikidata over HTTP, a directory of
JSON fixtures, and a stub that always fails. ``KBClient`` puts a one-file-per-id
JSON cache in front of whichever backend is configured.
"""

from __future__ import annotations

import json
import logging
import os
import re
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol

from .data import tokenize

log = logging.getLogger(__name__)

WIKIDATA_API = "https://www.wikidata.org/w/api.php"
INSTANCE_OF = "P31"
SUBPROPERTY_OF = "P1647"


class KBError(Exception):
    pass


class NotFoundError(KBError):
    """The id is unknown to the backend or not valid for it."""


class TransportError(KBError):
    """The backend could not be reached."""


@dataclass(frozen=True)
class AuxKnowledge:
    description: tuple[str, ...]
    domain: tuple[str, ...]
    source: str = "live"

    def to_json(self) -> dict:
        return {"description": list(self.description), "domain": list(self.domain)}


class Backend(Protocol):
    def entity(self, id: str) -> dict: ...

    def relation(self, id: str) -> dict: ...


class FixtureBackend:
    """Reads ``<root>/<id>.json`` files; never touches the network.

    Entity files carry ``description`` and ``domain``; relation files carry
    ``surface`` and a slash-separated ``hierarchy``.
    """

    source = "fixture"

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def _read(self, id: str) -> dict:
        if not id or "/" in id or id.startswith("."):
            raise NotFoundError(id)
        path = self.root / f"{id}.json"
        if not path.is_file():
            raise NotFoundError(id)
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)

    def entity(self, id: str) -> dict:
        return self._read(id)

    def relation(self, id: str) -> dict:
        return self._read(id)


class FailingBackend:
    """Raises on every call; pairs with a warm cache for strictly offline runs."""

    source = "live"

    def entity(self, id: str) -> dict:
        raise TransportError(f"network access disabled (entity {id})")

    def relation(self, id: str) -> dict:
        raise TransportError(f"network access disabled (relation {id})")


def _requests_get(url: str, params: dict) -> dict:
    import requests

    try:
        resp = requests.get(url, params=params, timeout=20,
                            headers={"User-Agent": "ktg-kb-client/0.1"})
        resp.raise_for_status()
        return resp.json()
    except requests.RequestException as exc:
        raise TransportError(str(exc)) from exc


class WikidataBackend:
    """``wbgetentities`` client.

    Domain is the English label of the first instance-of (P31) value. Relation
    hierarchies follow subproperty-of (P1647) links upward and are rooted at
    ``root``.
    """

    source = "live"
    _ENTITY_ID = re.compile(r"^Q[1-9]\d*$")
    _PROPERTY_ID = re.compile(r"^P[1-9]\d*$")

    def __init__(self, get: Callable[[str, dict], dict] = _requests_get, lang: str = "en",
                 max_depth: int = 6):
        self.get = get
        self.lang = lang
        self.max_depth = max_depth

    def _fetch(self, ids: str, props: str) -> dict:
        data = self.get(WIKIDATA_API, {
            "action": "wbgetentities", "ids": ids, "props": props,
            "languages": self.lang, "format": "json",
        })
        if "error" in data:
            raise NotFoundError(ids)
        ent = data.get("entities", {}).get(ids)
        if ent is None or "missing" in ent:
            raise NotFoundError(ids)
        return ent

    def _label(self, ent: dict) -> str:
        return ent.get("labels", {}).get(self.lang, {}).get("value", "")

    @staticmethod
    def _first_claim_id(ent: dict, prop: str) -> str | None:
        for claim in ent.get("claims", {}).get(prop, []):
            value = claim.get("mainsnak", {}).get("datavalue", {}).get("value")
            if isinstance(value, dict) and "id" in value:
                return value["id"]
        return None

    def entity(self, id: str) -> dict:
        if not self._ENTITY_ID.match(id):
            raise NotFoundError(id)
        ent = self._fetch(id, "labels|descriptions|claims")
        desc = ent.get("descriptions", {}).get(self.lang, {}).get("value", "")
        domain = ""
        cls = self._first_claim_id(ent, INSTANCE_OF)
        if cls:
            domain = self._label(self._fetch(cls, "labels"))
        return {"label": self._label(ent), "description": desc, "domain": domain}

    def relation(self, id: str) -> dict:
        if not self._PROPERTY_ID.match(id):
            raise NotFoundError(id)
        ent = self._fetch(id, "labels|claims")
        chain = [self._label(ent)]
        seen = {id}
        parent = self._first_claim_id(ent, SUBPROPERTY_OF)
        while parent and parent not in seen and len(chain) < self.max_depth:
            seen.add(parent)
            pent = self._fetch(parent, "labels|claims")
            chain.append(self._label(pent))
            parent = self._first_claim_id(pent, SUBPROPERTY_OF)
        segments = ["_".join(tokenize(s)) for s in reversed(chain) if s]
        return {"surface": chain[0], "hierarchy": "/".join(["root", *segments])}


def _atomic_write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".json")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, ensure_ascii=False, sort_keys=True)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class KBClient:
    """Cached lookups of auxiliary knowledge.

    ``cache_dir`` defaults to ``$KTG_CACHE_DIR``; ``None`` with no env var
    disables caching. Cache entries are never evicted.
    """

    def __init__(self, backend: Backend, cache_dir: str | Path | None = None):
        self.backend = backend
        if cache_dir is None:
            cache_dir = os.environ.get("KTG_CACHE_DIR")
        self.cache_dir = Path(cache_dir) if cache_dir else None

    def _cache_path(self, kind: str, id: str) -> Path | None:
        if self.cache_dir is None:
            return None
        safe = re.sub(r"[^\w.-]", "_", id)
        return self.cache_dir / f"{kind}-{safe}.json"

    def _cached(self, kind: str, id: str) -> dict | None:
        path = self._cache_path(kind, id)
        if path is None or not path.is_file():
            return None
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)

    def _store(self, kind: str, id: str, payload: dict) -> None:
        path = self._cache_path(kind, id)
        if path is not None:
            _atomic_write_json(path, payload)

    def enrich_entity(self, id: str) -> AuxKnowledge:
        hit = self._cached("entity", id)
        if hit is not None:
            return AuxKnowledge(tuple(hit["description"]), tuple(hit["domain"]), source="cache")
        rec = self.backend.entity(id)
        aux = AuxKnowledge(
            description=tuple(tokenize(rec.get("description"))),
            domain=tuple(tokenize(rec.get("domain"))),
            source=getattr(self.backend, "source", "live"),
        )
        self._store("entity", id, aux.to_json())
        return aux

    def relation_record(self, id: str, surface: str | None = None) -> dict:
        """Cached ``{"hierarchy": [...], "surface": str}`` for a relation."""
        hit = self._cached("relation", id)
        if hit is not None:
            return hit
        rec = self.backend.relation(id)
        raw = rec.get("hierarchy") or ""
        if isinstance(raw, str):
            raw = [s for s in raw.split("/") if s]
        surface = rec.get("surface") or surface or id.replace("_", " ")
        segments = [s.lower() for s in raw]
        if not segments:
            segments = ["root", "_".join(tokenize(surface))]
        elif segments[0] != "root":
            segments.insert(0, "root")
        out = {"hierarchy": segments, "surface": surface}
        self._store("relation", id, out)
        return out

    def enrich_relation(self, id: str, surface: str | None = None) -> list[str]:
        """Ordered hierarchy segments, generic to specific, starting at ``root``."""
        return list(self.relation_record(id, surface)["hierarchy"])


def enrich_record(rec: dict, client: KBClient, strict: bool = False) -> dict:
    """Fill entity description/domain and relation surface/hierarchy from ``client``.

    Lookup failures leave the fields empty (encoded later as ``<empty>``) and
    log a warning, unless ``strict``.
    """
    out = {**rec, "entities": [], "relations": []}
    for ent in rec["entities"]:
        ent = dict(ent)
        try:
            aux = client.enrich_entity(str(ent.get("id", "")))
            ent["description"] = " ".join(aux.description)
            ent["domain"] = " ".join(aux.domain)
        except KBError as exc:
            if strict:
                raise
            log.warning("no auxiliary knowledge for entity %s: %s", ent.get("id"), exc)
            ent.setdefault("description", "")
            ent.setdefault("domain", "")
        out["entities"].append(ent)
    for rel in rec["relations"]:
        rel = dict(rel)
        rid = str(rel.get("id", ""))
        try:
            info = client.relation_record(rid, rel.get("surface"))
            rel["hierarchy"] = list(info["hierarchy"])
            rel.setdefault("surface", info["surface"])
        except KBError as exc:
            if strict:
                raise
            log.warning("no hierarchy for relation %s: %s", rid, exc)
        out["relations"].append(rel)
    return out
