"""
test_metamodel.py - Testes do metamodelo de esquemas e registros
"""

import json
import os
import random
import re
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core.metamodel import (
    AttributeSpec, MalformedRecord, MetadataRecord, SchemaRegistry, compatibility_violations,
    load_baseline, parse_schema,
)
from core.protocol import Conflict, Malformed, NotFound
from config import CONFIG
from tests.test_config import limpar_diretorio, novo_diretorio


def image_values(**overrides):
    values = {
        "study": "node-a:00000002",
        "view": "CC",
        "laterality": "L",
        "lfn": "/node-a/patient-P-0/study-ST-1/img-L-CC.smi",
        "checksum": "a" * 64,
        "width": 64,
        "height": 64,
        "tube_kvp": 28,
        "exposure_mas": 100.0,
        "detector_gain": 1.0,
        "detector_offset": 0.0,
        "site": "node-a",
    }
    values.update(overrides)
    return values


STUDY_VALUES = {
    "patient": "node-a:00000001", "study_id": "ST-1", "study_date": "2023-05-02", "laterality": "LR",
    "site": "node-a",
}

# valores candidatos para as mutações; timestamps válidos listados à parte
MUTATION_POOL = (
    "CC", "MLO", "L", "R", "LR", "x", "", "/node-a/x.smi", "/a/b-c/d_e.smi", "sem-barra", "/a//b", "/a/b c",
    "02/05/2023", "2023-05-02", "2023-05-02T10:30:00", "node-a:00000002",
    0, 7, -3, 2.5, float("inf"), True, False, None, [1], {"a": 1},
)
VALID_TIMESTAMPS = {"2023-05-02", "2023-05-02T10:30:00"}
LFN_COMPONENT = re.compile(r"[A-Za-z0-9._-]+")


def value_is_valid(attr, value):
    """Verificador independente, atributo por atributo"""
    if attr.type == "string":
        return isinstance(value, str)
    if attr.type == "integer":
        return type(value) is int
    if attr.type == "real":
        return type(value) in (int, float)
    if attr.type == "timestamp":
        return isinstance(value, str) and value in VALID_TIMESTAMPS
    if attr.type == "enum":
        return isinstance(value, str) and value in attr.values
    if attr.type == "lfn-ref":
        return (isinstance(value, str) and value.startswith("/") and value != "/"
                and all(LFN_COMPONENT.fullmatch(c) for c in value[1:].split("/")))
    raise AssertionError(attr.type)


def brute_force_violations(schema, values):
    bad = set()
    for attr in schema.attributes:
        value = values.get(attr.name)
        if value is None:
            if attr.required:
                bad.add(attr.name)
        elif not value_is_valid(attr, value):
            bad.add(attr.name)
    bad.update(name for name in values if schema.attribute(name) is None)
    return bad


class TestSchemaDocuments:
    """Interpretação de documentos de esquema"""

    def test_baseline_kinds(self, registry):
        assert registry.kinds() == ["annotation", "image", "patient", "study"]
        image = registry.get("image")
        assert image.version == 1
        assert image.attribute("view").values == ("CC", "MLO")
        assert image.attribute("lfn").type == "lfn-ref"
        assert image.attribute("spacing_mm").required is False

    def test_parse_from_text(self):
        schema = parse_schema(json.dumps({
            "name": "phantom", "version": 1,
            "attributes": [{"name": "serial", "type": "string", "required": True}],
        }))
        assert schema.attribute("serial").required is True

    @pytest.mark.parametrize("document", [
        "não é json",
        [],
        {"version": 1, "attributes": []},
        {"name": "x", "version": 0, "attributes": []},
        {"name": "x", "version": True, "attributes": []},
        {"name": "x", "version": 1, "attributes": [{"name": "a", "type": "blob"}]},
        {"name": "x", "version": 1, "attributes": [{"name": "a", "type": "enum", "values": []}]},
        {"name": "x", "version": 1, "attributes": [{"name": "a", "type": "string"}, {"name": "a", "type": "integer"}]},
    ])
    def test_invalid_documents(self, document):
        with pytest.raises(Malformed):
            parse_schema(document)

    def test_serialize_is_stable(self, registry):
        schema = registry.get("study")
        assert parse_schema(schema.serialize()) == schema


class TestValidation:
    """Validação de registros contra o esquema"""

    def test_valid_image(self, registry):
        record = MetadataRecord("node-a:00000003", "image", 1, image_values(), "node-a")
        validated = registry.validate_record(record)
        # reais são normalizados para float
        assert validated.values["tube_kvp"] == 28.0
        assert isinstance(validated.values["tube_kvp"], float)

    def test_all_violations_are_listed(self, registry):
        values = image_values(view="XX", width="64", lfn="sem-barra", extra="?")
        del values["site"]
        record = MetadataRecord("node-a:00000003", "image", 1, values, "node-a")
        with pytest.raises(MalformedRecord) as exc:
            registry.validate_record(record)
        names = sorted(v.split(":")[0] for v in exc.value.violations)
        assert names == ["extra", "lfn", "site", "view", "width"]

    def test_boolean_is_not_integer(self, registry):
        record = MetadataRecord("r", "image", 1, image_values(width=True), "node-a")
        with pytest.raises(MalformedRecord):
            registry.validate_record(record)

    def test_timestamp_normalized(self, registry):
        values = {"patient": "node-a:1", "study_id": "ST-1", "laterality": "LR", "site": "node-a",
                  "study_date": "2023-05-02"}
        validated = registry.validate_record(MetadataRecord("r", "study", 1, values))
        assert validated.values["study_date"] == "2023-05-02"
        values["study_date"] = "02/05/2023"
        with pytest.raises(MalformedRecord):
            registry.validate_record(MetadataRecord("r", "study", 1, values))

    def test_optional_attributes_may_be_absent(self, registry):
        values = {"pseudonym": "P-0011223344556677", "site": "node-b"}
        assert registry.validate_record(MetadataRecord("r", "patient", 1, values)).values == values

    def test_random_mutations_match_brute_force(self, registry):
        rng = random.Random(77)
        bases = {"image": image_values(), "study": dict(STUDY_VALUES)}
        for _ in range(1000):
            kind = rng.choice(sorted(bases))
            schema = registry.get(kind)
            values = dict(bases[kind])
            for _ in range(rng.randint(0, 3)):
                action = rng.random()
                if action < 0.2:
                    values.pop(rng.choice(schema.attribute_names), None)
                elif action < 0.3:
                    values[f"extra_{rng.randint(0, 9)}"] = rng.choice(MUTATION_POOL)
                else:
                    values[rng.choice(schema.attribute_names)] = rng.choice(MUTATION_POOL)
            expected = brute_force_violations(schema, values)
            record = MetadataRecord("node-a:00000009", kind, 1, values, "node-a")
            if expected:
                with pytest.raises(MalformedRecord) as exc:
                    registry.validate_record(record)
                assert {v.split(":")[0] for v in exc.value.violations} == expected
            else:
                registry.validate_record(record)

    def test_unknown_kind_or_version(self, registry):
        with pytest.raises(NotFound):
            registry.validate_record(MetadataRecord("r", "phantom", 1, {}))
        with pytest.raises(NotFound):
            registry.validate_record(MetadataRecord("r", "patient", 7, {}))


class TestEvolution:
    """Evolução de esquemas: só acréscimos opcionais e enums ampliados"""

    def test_add_optional_attribute(self, registry):
        base = registry.get("image")
        newer = registry.evolve_schema(base, [AttributeSpec("compressed_breast_mm", "real")])
        assert newer.version == 2
        assert registry.get("image").version == 2
        # registros da versão anterior continuam válidos
        registry.validate_record(MetadataRecord("r", "image", 1, image_values()))
        registry.validate_record(MetadataRecord("r", "image", 2, image_values(compressed_breast_mm=45.5)))

    def test_widen_enum(self, registry):
        base = registry.get("annotation")
        newer = registry.evolve_schema(base, [AttributeSpec("finding", "enum", True, ("architectural-distortion",))])
        assert newer.attribute("finding").values[-1] == "architectural-distortion"
        assert set(base.attribute("finding").values) < set(newer.attribute("finding").values)

    def test_required_addition_conflicts(self, registry):
        with pytest.raises(Conflict):
            registry.evolve_schema(registry.get("patient"), [AttributeSpec("sex", "string", required=True)])
        assert registry.get("patient").version == 1

    def test_retyping_conflicts(self, registry):
        with pytest.raises(Conflict):
            registry.evolve_schema(registry.get("image"), [AttributeSpec("width", "real")])

    def test_violations_report(self, registry):
        base = registry.get("study")
        narrowed = parse_schema({
            "name": "study", "version": 2,
            "attributes": [
                {"name": "patient", "type": "string", "required": True},
                {"name": "study_id", "type": "integer", "required": True},
                {"name": "laterality", "type": "enum", "values": ["L", "R"], "required": True},
                {"name": "site", "type": "string", "required": True},
                {"name": "operator", "type": "string", "required": True},
            ],
        })
        problems = compatibility_violations(base, narrowed)
        joined = " | ".join(problems)
        assert "study_date: removido" in joined
        assert "study_id: tipo alterado" in joined
        assert "laterality: enum estreitado" in joined
        assert "operator: novo atributo obrigatório" in joined
        with pytest.raises(Conflict):
            registry.register(narrowed, persist=False)

    def test_same_version_different_content(self, registry):
        other = parse_schema({"name": "patient", "version": 1, "attributes": []})
        with pytest.raises(Conflict):
            registry.register(other, persist=False)

    def test_duplicate_delta_names_conflict(self, registry):
        delta = [AttributeSpec("compressed_breast_mm", "real"), AttributeSpec("compressed_breast_mm", "integer")]
        with pytest.raises(Conflict, match="compressed_breast_mm"):
            registry.evolve_schema(registry.get("image"), delta)
        assert registry.get("image").version == 1

    def test_register_rejects_unparseable_schema(self, registry):
        base = registry.get("image")
        duplicated = type(base)("image", 2, base.attributes + (AttributeSpec("width", "integer"),))
        with pytest.raises(Malformed):
            registry.register(duplicated, persist=False)
        assert registry.get("image").version == 1

    def test_version_gap_conflicts(self, registry):
        base = registry.get("image")
        skipped = type(base)("image", 3, base.attributes + (AttributeSpec("detector_serial", "string"),))
        with pytest.raises(Conflict, match="fora de ordem"):
            registry.register(skipped, persist=False)
        registry.evolve_schema(base, [AttributeSpec("detector_serial", "string")])
        # v3 é comparado com v2, não com v1
        narrowed = type(base)("image", 3, base.attributes)
        with pytest.raises(Conflict, match="detector_serial"):
            registry.register(narrowed, persist=False)

    def test_evolving_older_version_conflicts(self, registry):
        base = registry.get("patient")
        registry.evolve_schema(base, [AttributeSpec("ethnicity", "string")])
        with pytest.raises(Conflict):
            registry.evolve_schema(base, [AttributeSpec("smoker", "string")])
        assert registry.get("patient").version == 2

    def test_random_compatible_deltas(self, registry):
        rng = random.Random(20)
        record = MetadataRecord("r", "annotation", 1, {
            "image": "node-a:00000003", "annotator_role": "radiologist", "finding": "mass", "site": "node-a",
        })
        for step in range(25):
            base = registry.get("annotation")
            delta = []
            for i in range(rng.randint(1, 3)):
                delta.append(AttributeSpec(f"extra_{step}_{i}", rng.choice(["string", "integer", "real", "timestamp"])))
            if rng.random() < 0.5:
                enum = base.attribute(rng.choice(["annotator_role", "finding", "region_shape"]))
                delta.append(AttributeSpec(enum.name, "enum", enum.required, (f"novo-{step}",)))
            newer = registry.evolve_schema(base, delta)
            assert newer.version == base.version + 1
            assert compatibility_violations(base, newer) == []
            assert parse_schema(newer.serialize()) == newer
            registry.validate_record(record)

    def test_random_breaking_deltas(self, registry):
        rng = random.Random(21)
        base = registry.get("image")
        for _ in range(25):
            existing = rng.choice(base.attributes)
            breaking = rng.choice([
                AttributeSpec(f"obrigatorio_{rng.randint(0, 999)}", "string", required=True),
                AttributeSpec(existing.name, "enum" if existing.type != "enum" else "string"),
                AttributeSpec("nome_repetido", "string"),
            ])
            delta = [breaking]
            if breaking.name == "nome_repetido":
                delta.append(breaking)
            with pytest.raises(Conflict):
                registry.evolve_schema(base, delta)
        assert registry.get("image").version == 1


class TestPersistence:
    @pytest.fixture(autouse=True)
    def setup_method(self):
        self.dir = novo_diretorio("esquemas")
        yield
        limpar_diretorio(self.dir)

    def test_evolved_schema_reloads(self):
        registry = SchemaRegistry(self.dir)
        load_baseline(registry, CONFIG.schema_dir)
        registry.evolve_schema(registry.get("image"), [AttributeSpec("detector_serial", "string")])
        assert os.path.exists(os.path.join(self.dir, "image.v2.json"))

        reloaded = SchemaRegistry(self.dir)
        assert reloaded.get("image").version == 2
        assert reloaded.get("image").attribute("detector_serial") is not None
        assert reloaded.get("patient").version == 1

    def test_duplicate_delta_writes_nothing(self):
        registry = SchemaRegistry(self.dir)
        load_baseline(registry, CONFIG.schema_dir)
        with pytest.raises(Conflict):
            registry.evolve_schema(registry.get("image"), [AttributeSpec("x", "string"), AttributeSpec("x", "real")])
        assert not os.path.exists(os.path.join(self.dir, "image.v2.json"))

        reloaded = SchemaRegistry(self.dir)
        assert reloaded.get("image").version == 1
        assert sorted(reloaded.kinds()) == ["annotation", "image", "patient", "study"]
