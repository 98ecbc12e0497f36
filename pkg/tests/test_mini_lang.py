"""
Tests for the lexer, parser and pretty printer.
"""
import pytest

from sparse_graph_attention.modules.data_types import AstKind, TokenKind
from sparse_graph_attention.modules.errors import SourceSyntaxError, UnknownCharacter
from sparse_graph_attention.modules.mini_lang import lex, parse, parse_source, pretty_print
from sparse_graph_attention.modules.tasks import generate_dataset

from tests.helpers import SAMPLE_PROGRAM


def test_lex_kinds_and_positions():
    tokens = lex("if x == 10 { y = x }")
    assert [t.text for t in tokens] == ["if", "x", "==", "10", "{", "y", "=", "x", "}"]
    assert tokens[0].kind == TokenKind.KEYWORD
    assert tokens[1].kind == TokenKind.IDENTIFIER
    assert tokens[2].kind == TokenKind.OPERATOR
    assert tokens[3].kind == TokenKind.INT_LITERAL
    assert tokens[4].kind == TokenKind.PUNCT
    assert [t.position for t in tokens] == list(range(9))


def test_lex_skips_comments():
    assert [t.text for t in lex("x = 1 # set x\ny = 2")] == ["x", "=", "1", "y", "=", "2"]


def test_lex_unknown_character():
    with pytest.raises(UnknownCharacter) as info:
        lex("x = 1 $ 2")
    assert info.value.position == 6


def test_parse_spans_and_depths():
    ast, tokens = parse_source("x = a + 1")
    assert ast.kind == AstKind.PROGRAM
    assert ast.token_span == (0, 4)
    assign = ast.children[0]
    assert assign.kind == AstKind.ASSIGN and assign.depth == 1
    target, value = assign.children
    assert target.kind == AstKind.IDENT and target.token_span == (0, 0)
    assert value.kind == AstKind.BIN_OP and value.token_span == (2, 4) and value.depth == 2
    assert [c.kind for c in value.children] == [AstKind.IDENT, AstKind.LIT]


def test_operator_precedence():
    ast, _ = parse_source("x = a + b * 2")
    value = ast.children[0].children[1]
    assert value.text == "+"
    assert value.children[1].text == "*"


def test_parenthesized_span_covers_parentheses():
    ast, tokens = parse_source("x = ( a + b ) * 2")
    value = ast.children[0].children[1]
    assert value.token_span == (2, 8)
    inner = value.children[0]
    assert inner.token_span == (3, 5)


def test_if_else_and_while():
    ast, _ = parse_source(SAMPLE_PROGRAM)
    kinds = [child.kind for child in ast.children]
    assert kinds == [AstKind.ASSIGN, AstKind.ASSIGN, AstKind.IF, AstKind.WHILE]
    if_node = ast.children[2]
    assert [c.kind for c in if_node.children] == [AstKind.COMPARE, AstKind.BLOCK, AstKind.BLOCK]


@pytest.mark.parametrize("source, position, expected", [
    ("x = ", 2, "expression"),
    ("x 1", 1, "'='"),
    ("if x { y = 1 }", 2, "comparison operator"),
    ("while x < 1 { y = 1", 8, "'}'"),
    ("= 1", 0, "statement"),
])
def test_syntax_errors(source, position, expected):
    with pytest.raises(SourceSyntaxError) as info:
        parse(lex(source))
    assert info.value.position == position
    assert info.value.expected == expected


def test_empty_program_is_a_syntax_error():
    with pytest.raises(SourceSyntaxError):
        parse([])


def test_pretty_print_round_trip():
    ast, _ = parse_source(SAMPLE_PROGRAM)
    printed = pretty_print(ast)
    reparsed, _ = parse_source(printed)
    assert reparsed == ast
    assert pretty_print(reparsed) == printed


def test_pretty_print_drops_redundant_parentheses():
    ast, _ = parse_source("x = ( a * b ) + ( c - d )")
    assert pretty_print(ast) == "x = a * b + ( c - d )\n"


def shape(ast):
    return [(node.kind, node.text, node.depth, len(node.children)) for node in ast.iter_preorder()]


@pytest.mark.parametrize("seed", range(5))
def test_pretty_print_round_trip_on_generated_programs(seed):
    for sample in generate_dataset(20, 0.5, (3, 12), seed=seed):
        ast, _ = parse_source(sample.source)
        printed = pretty_print(ast)
        reparsed, _ = parse_source(printed)
        assert shape(reparsed) == shape(ast)
        assert pretty_print(reparsed) == printed


def test_preorder_visits_parents_before_children():
    ast, _ = parse_source(SAMPLE_PROGRAM)
    nodes = list(ast.iter_preorder())
    assert nodes[0] is ast
    assert [n.kind for n in nodes[:3]] == [AstKind.PROGRAM, AstKind.ASSIGN, AstKind.IDENT]
    depths = [n.depth for n in nodes]
    assert all(b <= a + 1 for a, b in zip(depths, depths[1:]))
