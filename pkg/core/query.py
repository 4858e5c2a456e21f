"""
query.py - Linguagem de consulta dos clínicos

    FIND <kind> [PROJECT a, b, ...] WHERE <predicado> [AT nó, ...]

Tokenizador, parser, impressora canônica, verificação contra os esquemas
e avaliação local. Também define SubQuery e ResultSet, que circulam
entre os nós.
"""

import re
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

from .metamodel import AttributeSpec, MetadataRecord, SchemaDescription, SchemaRegistry
from .protocol import Malformed, NotFound, QuerySyntaxError
from .security import Formatters


KEYWORDS = ("FIND", "PROJECT", "WHERE", "AT", "AND", "OR", "NOT")
OPERATORS = ("=", "!=", "<", "<=", ">", ">=")
OP_ALIASES = {"≠": "!=", "≤": "<=", "≥": ">="}
BAREWORD = re.compile(r"[A-Za-z0-9_.:/+-]+")

_SYMBOLS = ("!=", "<=", ">=", "=", "<", ">", "≠", "≤", "≥", "(", ")", ",")


@dataclass(frozen=True)
class Token:
    type: str  # WORD, STRING, OP, LPAREN, RPAREN, COMMA, EOF
    value: str
    index: int  # posição 1-based


@dataclass(frozen=True)
class Comparison:
    attr: str
    op: str
    value: str


@dataclass(frozen=True)
class And:
    operands: Tuple[Any, ...]


@dataclass(frozen=True)
class Or:
    operands: Tuple[Any, ...]


@dataclass(frozen=True)
class Not:
    operand: Any


Predicate = Union[Comparison, And, Or, Not]


@dataclass(frozen=True)
class Query:
    kind: str
    predicate: Predicate
    projection: Tuple[str, ...] = ()
    site_filter: Optional[Tuple[str, ...]] = None


# ---------------------------------------------------------------- tokenização

def tokenize(text: str) -> List[Token]:
    tokens: List[Token] = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
            continue
        index = len(tokens) + 1
        if ch == '"':
            j, chars = i + 1, []
            while j < n and text[j] != '"':
                if text[j] == "\\":
                    j += 1
                    if j >= n:
                        break
                chars.append(text[j])
                j += 1
            if j >= n:
                raise QuerySyntaxError(f"token {index}: texto entre aspas não terminado", index)
            tokens.append(Token("STRING", "".join(chars), index))
            i = j + 1
            continue
        symbol = next((s for s in _SYMBOLS if text.startswith(s, i)), None)
        if symbol is not None:
            if symbol == "(":
                tokens.append(Token("LPAREN", symbol, index))
            elif symbol == ")":
                tokens.append(Token("RPAREN", symbol, index))
            elif symbol == ",":
                tokens.append(Token("COMMA", symbol, index))
            else:
                tokens.append(Token("OP", OP_ALIASES.get(symbol, symbol), index))
            i += len(symbol)
            continue
        match = BAREWORD.match(text, i)
        if match is None:
            raise QuerySyntaxError(f"token {index}: caractere inesperado {ch!r}", index)
        tokens.append(Token("WORD", match.group(0), index))
        i = match.end()
    tokens.append(Token("EOF", "", len(tokens) + 1))
    return tokens


# ---------------------------------------------------------------- parser

class _Parser:
    def __init__(self, text: str) -> None:
        self.tokens = tokenize(text)
        self.pos = 0

    @property
    def current(self) -> Token:
        return self.tokens[self.pos]

    def advance(self) -> Token:
        token = self.tokens[self.pos]
        if token.type != "EOF":
            self.pos += 1
        return token

    def error(self, expected: str) -> QuerySyntaxError:
        token = self.current
        found = "fim da consulta" if token.type == "EOF" else repr(token.value)
        return QuerySyntaxError(f"token {token.index}: esperado {expected}, encontrado {found}", token.index)

    def is_keyword(self, word: str) -> bool:
        return self.current.type == "WORD" and self.current.value.upper() == word

    def expect_keyword(self, word: str) -> None:
        if not self.is_keyword(word):
            raise self.error(word)
        self.advance()

    def name(self, what: str) -> str:
        token = self.current
        if token.type != "WORD" or token.value.upper() in KEYWORDS:
            raise self.error(what)
        self.advance()
        return token.value

    def name_list(self, what: str) -> Tuple[str, ...]:
        names = [self.name(what)]
        while self.current.type == "COMMA":
            self.advance()
            names.append(self.name(what))
        return tuple(names)

    def query(self) -> Query:
        self.expect_keyword("FIND")
        kind = self.name("tipo de registro")
        projection: Tuple[str, ...] = ()
        if self.is_keyword("PROJECT"):
            self.advance()
            projection = self.name_list("atributo")
        self.expect_keyword("WHERE")
        predicate = self.disjunction()
        site_filter = None
        if self.is_keyword("AT"):
            self.advance()
            site_filter = self.name_list("nó")
        if self.current.type != "EOF":
            raise self.error("fim da consulta")
        return Query(kind, predicate, projection, site_filter)

    def predicate_only(self) -> Predicate:
        predicate = self.disjunction()
        if self.current.type != "EOF":
            raise self.error("fim do predicado")
        return predicate

    def disjunction(self) -> Predicate:
        operands = [self.conjunction()]
        while self.is_keyword("OR"):
            self.advance()
            operands.append(self.conjunction())
        return _flatten(Or, operands)

    def conjunction(self) -> Predicate:
        operands = [self.factor()]
        while self.is_keyword("AND"):
            self.advance()
            operands.append(self.factor())
        return _flatten(And, operands)

    def factor(self) -> Predicate:
        if self.is_keyword("NOT"):
            self.advance()
            return Not(self.factor())
        if self.current.type == "LPAREN":
            self.advance()
            inner = self.disjunction()
            if self.current.type != "RPAREN":
                raise self.error("')'")
            self.advance()
            return inner
        attr = self.name("predicado")
        if self.current.type != "OP":
            raise self.error("operador de comparação")
        op = self.advance().value
        if self.current.type not in ("WORD", "STRING"):
            raise self.error("literal")
        return Comparison(attr, op, self.advance().value)


def _flatten(cls, operands: List[Predicate]) -> Predicate:
    if len(operands) == 1:
        return operands[0]
    flat: List[Predicate] = []
    for operand in operands:
        flat.extend(operand.operands if isinstance(operand, cls) else (operand,))
    return cls(tuple(flat))


def parse_query(text: str) -> Query:
    """
    Interpreta o texto da consulta.

    Raises:
        QuerySyntaxError: com a posição (índice do token) do primeiro erro
    """
    return _Parser(text).query()


def parse_predicate(text: str) -> Predicate:
    return _Parser(text).predicate_only()


# ---------------------------------------------------------------- impressão

def format_literal(value: str) -> str:
    if BAREWORD.fullmatch(value) and value.upper() not in KEYWORDS:
        return value
    escaped = value.replace("\\", "\\\\").replace('"', '\\"')
    return f'"{escaped}"'


def format_predicate(predicate: Predicate) -> str:
    if isinstance(predicate, Comparison):
        return f"{predicate.attr} {predicate.op} {format_literal(predicate.value)}"
    if isinstance(predicate, Not):
        return f"NOT {_wrapped(predicate.operand)}"
    joiner = " AND " if isinstance(predicate, And) else " OR "
    return joiner.join(_wrapped(p) for p in predicate.operands)


def _wrapped(predicate: Predicate) -> str:
    text = format_predicate(predicate)
    return f"({text})" if isinstance(predicate, (And, Or)) else text


def format_query(query: Query) -> str:
    parts = [f"FIND {query.kind}"]
    if query.projection:
        parts.append("PROJECT " + ", ".join(query.projection))
    parts.append("WHERE " + format_predicate(query.predicate))
    if query.site_filter:
        parts.append("AT " + ", ".join(query.site_filter))
    return " ".join(parts)


def referenced_attributes(predicate: Predicate) -> List[str]:
    if isinstance(predicate, Comparison):
        return [predicate.attr]
    if isinstance(predicate, Not):
        return referenced_attributes(predicate.operand)
    names: List[str] = []
    for operand in predicate.operands:
        names.extend(referenced_attributes(operand))
    return names


# ---------------------------------------------------------------- tipagem e avaliação

def typed_literal(attr: AttributeSpec, raw: str) -> Any:
    """Converte o literal conforme o tipo do atributo; ValueError se incompatível"""
    if attr.type == "integer":
        if not re.fullmatch(r"[+-]?\d+", raw):
            raise ValueError(f"{attr.name} espera inteiro, não {raw!r}")
        return int(raw)
    if attr.type == "real":
        return float(raw)
    if attr.type == "timestamp":
        parsed = Formatters.parse_timestamp(raw)
        if parsed is None:
            raise ValueError(f"{attr.name} espera data ISO-8601, não {raw!r}")
        return parsed
    if attr.type == "enum" and raw not in attr.values:
        raise ValueError(f"{attr.name} aceita {', '.join(attr.values)}; {raw!r} não pertence")
    return raw


def typed_value(attr: AttributeSpec, value: Any) -> Any:
    if attr.type == "timestamp":
        return Formatters.parse_timestamp(value)
    if attr.type == "real":
        return float(value)
    return value


def validate_query(query: Query, registry: SchemaRegistry) -> SchemaDescription:
    """
    Verificação semântica: tipo conhecido, atributos existentes no esquema
    e literais compatíveis com o tipo de cada atributo.
    """
    try:
        schema = registry.get(query.kind)
    except NotFound:
        raise Malformed(f"tipo de registro desconhecido: {query.kind}")
    check_predicate(query.predicate, schema)
    unknown = [a for a in query.projection if schema.attribute(a) is None]
    if unknown:
        raise Malformed(f"atributos desconhecidos em {query.kind}: {', '.join(unknown)}")
    return schema


def check_predicate(predicate: Predicate, schema: SchemaDescription) -> None:
    problems = []
    for comparison in _comparisons(predicate):
        attr = schema.attribute(comparison.attr)
        if attr is None:
            problems.append(f"atributo desconhecido em {schema.name}: {comparison.attr}")
            continue
        try:
            typed_literal(attr, comparison.value)
        except ValueError as e:
            problems.append(str(e))
    if problems:
        raise Malformed("; ".join(problems))


def _comparisons(predicate: Predicate) -> Iterable[Comparison]:
    if isinstance(predicate, Comparison):
        yield predicate
    elif isinstance(predicate, Not):
        yield from _comparisons(predicate.operand)
    else:
        for operand in predicate.operands:
            yield from _comparisons(operand)


_COMPARE: Dict[str, Callable[[Any, Any], bool]] = {
    "=": lambda a, b: a == b,
    "!=": lambda a, b: a != b,
    "<": lambda a, b: a < b,
    "<=": lambda a, b: a <= b,
    ">": lambda a, b: a > b,
    ">=": lambda a, b: a >= b,
}


def compile_predicate(predicate: Predicate, schema: SchemaDescription) -> Callable[[Dict[str, Any]], bool]:
    """
    Gera uma função values -> bool. Comparação sobre atributo ausente é
    falsa; NOT apenas a nega (lógica de dois valores).
    """
    if isinstance(predicate, Comparison):
        attr = schema.attribute(predicate.attr)
        if attr is None:
            raise Malformed(f"atributo desconhecido em {schema.name}: {predicate.attr}")
        try:
            literal = typed_literal(attr, predicate.value)
        except ValueError as e:
            raise Malformed(str(e))
        compare = _COMPARE[predicate.op]
        name = predicate.attr

        def _test(values: Dict[str, Any]) -> bool:
            value = values.get(name)
            if value is None:
                return False
            return compare(typed_value(attr, value), literal)

        return _test
    if isinstance(predicate, Not):
        inner = compile_predicate(predicate.operand, schema)
        return lambda values: not inner(values)
    parts = [compile_predicate(p, schema) for p in predicate.operands]
    if isinstance(predicate, And):
        return lambda values: all(p(values) for p in parts)
    return lambda values: any(p(values) for p in parts)


# ---------------------------------------------------------------- sub-consultas e resultados

@dataclass(frozen=True)
class SubQuery:
    target_node: str
    kind: str
    predicate: Predicate
    projection: Tuple[str, ...] = ()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "target_node": self.target_node,
            "kind": self.kind,
            "where": format_predicate(self.predicate),
            "projection": list(self.projection),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SubQuery":
        try:
            return cls(
                str(data["target_node"]), str(data["kind"]),
                parse_predicate(str(data["where"])), tuple(data.get("projection") or ()),
            )
        except KeyError as e:
            raise Malformed(f"sub-consulta sem o campo {e}")


def record_identity(record: MetadataRecord) -> str:
    """Identidade lógica: imagens pelo checksum do blob, demais pelo record_id"""
    checksum = record.values.get("checksum") if record.kind == "image" else None
    return f"sha256:{checksum}" if checksum else record.record_id


@dataclass(frozen=True)
class ResultRow:
    record_id: str
    values: Dict[str, Any]
    identity: str

    def to_dict(self) -> Dict[str, Any]:
        return {"record_id": self.record_id, "values": dict(self.values), "identity": self.identity}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ResultRow":
        return cls(str(data["record_id"]), dict(data.get("values") or {}), str(data.get("identity") or data["record_id"]))


@dataclass(frozen=True)
class ResultSet:
    kind: str
    projection: Tuple[str, ...]
    rows: List[ResultRow] = field(default_factory=list)
    answered: Tuple[str, ...] = ()
    unreachable: Tuple[str, ...] = ()

    @property
    def status(self) -> str:
        return "partial" if self.unreachable else "complete"

    @property
    def record_ids(self) -> List[str]:
        return [r.record_id for r in self.rows]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "projection": list(self.projection),
            "rows": [r.to_dict() for r in self.rows],
            "answered": list(self.answered),
            "unreachable": list(self.unreachable),
            "status": self.status,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ResultSet":
        try:
            return cls(
                str(data["kind"]), tuple(data.get("projection") or ()),
                [ResultRow.from_dict(r) for r in data.get("rows") or []],
                tuple(data.get("answered") or ()), tuple(data.get("unreachable") or ()),
            )
        except (KeyError, TypeError) as e:
            raise Malformed(f"RESULTSET inválido: {e}")


def project(record: MetadataRecord, projection: Sequence[str]) -> Dict[str, Any]:
    if not projection:
        return dict(record.values)
    return {name: record.values[name] for name in projection if name in record.values}


def merge_results(parts: Sequence[ResultSet]) -> ResultSet:
    """
    União com deduplicação por identidade lógica (fica o menor record_id),
    ordenada por record_id. Independe da ordem de chegada das partes.

    Raises:
        Malformed: partes com tipo ou projeção diferentes
    """
    if not parts:
        raise Malformed("nenhuma parte para combinar")
    kind, projection = parts[0].kind, tuple(parts[0].projection)
    for part in parts[1:]:
        if part.kind != kind or tuple(part.projection) != projection:
            raise Malformed(f"partes divergentes: {part.kind}{list(part.projection)} vs {kind}{list(projection)}")
    by_id: Dict[str, ResultRow] = {}
    for part in parts:
        for row in part.rows:
            current = by_id.get(row.record_id)
            if current is None or (row.identity, row.record_id) < (current.identity, current.record_id):
                by_id[row.record_id] = row
    best: Dict[str, ResultRow] = {}
    for row in by_id.values():
        current = best.get(row.identity)
        if current is None or row.record_id < current.record_id:
            best[row.identity] = row
    rows = sorted(best.values(), key=lambda r: r.record_id)
    answered = sorted({n for p in parts for n in p.answered})
    unreachable = sorted({n for p in parts for n in p.unreachable} - set(answered))
    return ResultSet(kind, projection, rows, tuple(answered), tuple(unreachable))


def evaluate(records: Iterable[MetadataRecord], sub: SubQuery, schema: SchemaDescription,
             node_id: str) -> ResultSet:
    """Avaliação local de uma sub-consulta sobre os registros de um nó"""
    test = compile_predicate(sub.predicate, schema)
    rows = [
        ResultRow(r.record_id, project(r, sub.projection), record_identity(r))
        for r in records
        if r.kind == sub.kind and test(r.values)
    ]
    return merge_results([ResultSet(sub.kind, tuple(sub.projection), rows, (node_id,), ())])
