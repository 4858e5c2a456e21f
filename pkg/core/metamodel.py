"""
metamodel.py - Metadados orientados a descrição

Esquemas são documentos JSON interpretados em tempo de execução; registros
são validados contra (kind, versão). Versão n+1 só pode acrescentar
atributos opcionais ou ampliar enums.
"""

import glob
import json
import logging
import os
import threading
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

from .catalogue import validate_lfn
from .protocol import Conflict, GridError, Malformed, NotFound, canonical_json
from .security import Formatters


logger = logging.getLogger(__name__)

ATTR_TYPES = ("string", "integer", "real", "timestamp", "enum", "lfn-ref")


@dataclass(frozen=True)
class AttributeSpec:
    name: str
    type: str
    required: bool = False
    values: Tuple[str, ...] = ()

    def to_dict(self) -> Dict[str, Any]:
        doc: Dict[str, Any] = {"name": self.name, "type": self.type, "required": self.required}
        if self.type == "enum":
            doc["values"] = list(self.values)
        return doc


@dataclass(frozen=True)
class SchemaDescription:
    name: str
    version: int
    attributes: Tuple[AttributeSpec, ...]

    def attribute(self, name: str) -> Optional[AttributeSpec]:
        for attr in self.attributes:
            if attr.name == name:
                return attr
        return None

    @property
    def attribute_names(self) -> List[str]:
        return [a.name for a in self.attributes]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "version": self.version,
            "attributes": [a.to_dict() for a in self.attributes],
        }

    def serialize(self) -> str:
        return canonical_json(self.to_dict())


@dataclass(frozen=True)
class MetadataRecord:
    record_id: str
    kind: str
    schema_version: int
    values: Dict[str, Any] = field(default_factory=dict)
    origin_node: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return {
            "record_id": self.record_id,
            "kind": self.kind,
            "schema_version": self.schema_version,
            "values": dict(self.values),
            "origin_node": self.origin_node,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MetadataRecord":
        try:
            return cls(
                record_id=str(data["record_id"]),
                kind=str(data["kind"]),
                schema_version=int(data["schema_version"]),
                values=dict(data.get("values") or {}),
                origin_node=str(data.get("origin_node", "")),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise Malformed(f"registro inválido: {e}")


class MalformedRecord(Malformed):
    """Malformed com a lista de todos os atributos violados"""

    def __init__(self, violations: List[str]) -> None:
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


def parse_schema(document: Any) -> SchemaDescription:
    """Interpreta um documento de esquema (texto JSON ou dict)"""
    try:
        data = json.loads(document) if isinstance(document, (str, bytes)) else document
    except ValueError as e:
        raise Malformed(f"documento de esquema não é JSON: {e}")
    if not isinstance(data, dict):
        raise Malformed("documento de esquema deve ser um objeto")
    name = data.get("name")
    version = data.get("version")
    if not isinstance(name, str) or not name:
        raise Malformed("esquema sem nome")
    if not isinstance(version, int) or isinstance(version, bool) or version < 1:
        raise Malformed(f"versão inválida no esquema {name}")
    attributes = []
    seen = set()
    for item in data.get("attributes") or []:
        if not isinstance(item, dict):
            raise Malformed(f"atributo inválido no esquema {name}")
        attr_name = item.get("name")
        attr_type = item.get("type")
        if not isinstance(attr_name, str) or not attr_name:
            raise Malformed(f"atributo sem nome no esquema {name}")
        if attr_name in seen:
            raise Malformed(f"atributo duplicado no esquema {name}: {attr_name}")
        if attr_type not in ATTR_TYPES:
            raise Malformed(f"tipo desconhecido para {name}.{attr_name}: {attr_type}")
        values: Tuple[str, ...] = ()
        if attr_type == "enum":
            raw = item.get("values")
            if not isinstance(raw, list) or not raw or not all(isinstance(v, str) for v in raw):
                raise Malformed(f"enum sem valores em {name}.{attr_name}")
            values = tuple(raw)
        seen.add(attr_name)
        attributes.append(AttributeSpec(attr_name, attr_type, bool(item.get("required", False)), values))
    return SchemaDescription(name, version, tuple(attributes))


def compatibility_violations(base: SchemaDescription, newer: SchemaDescription) -> List[str]:
    """Regras de evolução: nada removido ou estreitado; novos atributos opcionais"""
    problems = []
    for attr in base.attributes:
        other = newer.attribute(attr.name)
        if other is None:
            problems.append(f"{attr.name}: removido")
            continue
        if other.type != attr.type:
            problems.append(f"{attr.name}: tipo alterado de {attr.type} para {other.type}")
        if other.required != attr.required:
            problems.append(f"{attr.name}: obrigatoriedade alterada")
        if attr.type == "enum" and not set(attr.values) <= set(other.values):
            problems.append(f"{attr.name}: enum estreitado")
    for attr in newer.attributes:
        if base.attribute(attr.name) is None and attr.required:
            problems.append(f"{attr.name}: novo atributo obrigatório")
    return problems


def coerce_value(attr: AttributeSpec, value: Any) -> Any:
    """Verifica o tipo e devolve o valor normalizado; ValueError se inválido"""
    if attr.type == "string":
        if not isinstance(value, str):
            raise ValueError("esperado texto")
        return value
    if attr.type == "integer":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValueError("esperado inteiro")
        return value
    if attr.type == "real":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError("esperado número real")
        return float(value)
    if attr.type == "timestamp":
        normalized = Formatters.normalize_timestamp(value) if isinstance(value, str) else None
        if normalized is None:
            raise ValueError("esperado timestamp ISO-8601")
        return normalized
    if attr.type == "enum":
        if value not in attr.values:
            raise ValueError(f"valor fora de {{{', '.join(attr.values)}}}")
        return value
    if attr.type == "lfn-ref":
        try:
            return validate_lfn(value)
        except GridError:
            raise ValueError("esperado LFN válido")
    raise ValueError(f"tipo desconhecido {attr.type}")


def validate_against(schema: SchemaDescription, record: MetadataRecord) -> MetadataRecord:
    violations = []
    normalized: Dict[str, Any] = {}
    for attr in schema.attributes:
        if attr.name not in record.values or record.values[attr.name] is None:
            if attr.required:
                violations.append(f"{attr.name}: atributo obrigatório ausente")
            continue
        try:
            normalized[attr.name] = coerce_value(attr, record.values[attr.name])
        except ValueError as e:
            violations.append(f"{attr.name}: {e}")
    for name in sorted(set(record.values) - set(schema.attribute_names)):
        violations.append(f"{name}: atributo desconhecido em {schema.name} v{schema.version}")
    if violations:
        raise MalformedRecord(violations)
    return MetadataRecord(record.record_id, record.kind, record.schema_version, normalized, record.origin_node)


class SchemaRegistry:
    """Registro local de esquemas: escritor único, muitos leitores"""

    def __init__(self, store_dir: Optional[str] = None) -> None:
        self.store_dir = store_dir
        self._lock = threading.Lock()
        self._schemas: Dict[Tuple[str, int], SchemaDescription] = {}
        if store_dir:
            os.makedirs(store_dir, exist_ok=True)
            self.load_directory(store_dir, persist=False)

    def load_directory(self, directory: str, persist: bool = True) -> List[SchemaDescription]:
        carregados = []
        # versões em ordem para que a compatibilidade seja verificada
        paths = sorted(glob.glob(os.path.join(directory, "*.json")))
        documents = []
        for path in paths:
            with open(path, "r", encoding="utf-8") as f:
                documents.append(parse_schema(f.read()))
        for schema in sorted(documents, key=lambda s: (s.name, s.version)):
            carregados.append(self.register(schema, persist=persist))
        return carregados

    def load_schema(self, document: Any) -> SchemaDescription:
        return self.register(parse_schema(document))

    def register(self, schema: SchemaDescription, persist: bool = True) -> SchemaDescription:
        """
        Registra (nome, versão). Uma nova versão deve ser a seguinte à maior
        já registrada e compatível com ela.

        Raises:
            Malformed: o documento do esquema não seria reinterpretável
            Conflict: conteúdo diferente, versão fora de ordem ou incompatível
        """
        # o que é gravado precisa voltar a ser lido por parse_schema
        parse_schema(schema.to_dict())
        with self._lock:
            key = (schema.name, schema.version)
            existing = self._schemas.get(key)
            if existing is not None:
                if existing != schema:
                    raise Conflict(f"{schema.name} v{schema.version} já registrado com conteúdo diferente")
                return existing
            versions = [v for (n, v) in self._schemas if n == schema.name]
            if versions and schema.version != max(versions) + 1:
                raise Conflict(f"{schema.name} v{schema.version} fora de ordem: última versão é v{max(versions)}")
            previous = self._schemas.get((schema.name, max(versions))) if versions else None
            if previous is not None:
                problems = compatibility_violations(previous, schema)
                if problems:
                    raise Conflict(f"{schema.name} v{schema.version} incompatível: " + "; ".join(problems))
            self._schemas[key] = schema
        if persist and self.store_dir:
            path = os.path.join(self.store_dir, f"{schema.name}.v{schema.version}.json")
            with open(path, "w", encoding="utf-8") as f:
                f.write(schema.serialize())
        logger.info(f"Esquema registrado: {schema.name} v{schema.version}")
        return schema

    def get(self, name: str, version: Optional[int] = None) -> SchemaDescription:
        with self._lock:
            if version is None:
                versions = [v for (n, v) in self._schemas if n == name]
                if not versions:
                    raise NotFound(f"esquema desconhecido: {name}")
                version = max(versions)
            schema = self._schemas.get((name, version))
        if schema is None:
            raise NotFound(f"esquema desconhecido: {name} v{version}")
        return schema

    def kinds(self) -> List[str]:
        with self._lock:
            return sorted({n for (n, _) in self._schemas})

    def validate_record(self, record: MetadataRecord) -> MetadataRecord:
        """
        Valida o registro contra o esquema (kind, versão).

        Raises:
            NotFound: esquema desconhecido
            MalformedRecord: lista todos os atributos violados
        """
        return validate_against(self.get(record.kind, record.schema_version), record)

    def evolve_schema(self, base: SchemaDescription, delta: List[AttributeSpec]) -> SchemaDescription:
        """
        Cria a versão base.version + 1 acrescentando atributos opcionais ou
        valores de enum (um AttributeSpec com nome já existente amplia o enum).

        Raises:
            Conflict: delta repete um nome ou viola a regra de compatibilidade
        """
        names = [extra.name for extra in delta]
        repeated = sorted({n for n in names if names.count(n) > 1})
        if repeated:
            raise Conflict(f"atributos repetidos na evolução de {base.name}: {', '.join(repeated)}")
        attributes = list(base.attributes)
        for extra in delta:
            current = base.attribute(extra.name)
            if current is None:
                attributes.append(extra)
                continue
            if current.type != "enum" or extra.type != "enum" or extra.required != current.required:
                raise Conflict(f"{extra.name}: só enums podem ser ampliados")
            widened = current.values + tuple(v for v in extra.values if v not in current.values)
            attributes = [AttributeSpec(a.name, a.type, a.required, widened) if a.name == extra.name else a
                          for a in attributes]
        newer = SchemaDescription(base.name, base.version + 1, tuple(attributes))
        problems = compatibility_violations(base, newer)
        if problems:
            raise Conflict(f"evolução incompatível de {base.name}: " + "; ".join(problems))
        return self.register(newer)


def load_baseline(registry: SchemaRegistry, schema_dir: str) -> List[SchemaDescription]:
    """Carrega os quatro esquemas de base (patient, study, image, annotation)"""
    return registry.load_directory(schema_dir, persist=True)
