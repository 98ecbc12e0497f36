"""
Lexer, recursive-descent parser and pretty printer for the mini-language.

Grammar:
    program := stmt+
    stmt    := assign | if | while
    assign  := IDENT '=' expr
    if      := 'if' cmp block ['else' block]
    while   := 'while' cmp block
    block   := '{' stmt* '}'
    cmp     := expr ('<' | '>' | '==') expr
    expr    := term (('+' | '-') term)*
    term    := factor (('*' | '/') factor)*
    factor  := IDENT | INT | '(' expr ')'

Every AST node records the (first, last) token positions it covers and its
depth below the Program root.
"""
import logging
import re
from dataclasses import dataclass, field, replace
from typing import Iterator, List, Optional, Tuple

from .data_types import AstKind, TokenKind
from .errors import SourceSyntaxError, UnknownCharacter

logger = logging.getLogger(__name__)

KEYWORDS = frozenset({"if", "else", "while"})
COMPARE_OPS = ("<", ">", "==")
ADD_OPS = ("+", "-")
MUL_OPS = ("*", "/")

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r\n]+)
  | (?P<comment>\#[^\n]*)
  | (?P<word>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<int>[0-9]+)
  | (?P<op>==|[=<>+\-*/])
  | (?P<punct>[(){}])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    """A lexical token with its 0-based position in the token sequence."""
    kind: TokenKind
    text: str
    position: int


@dataclass(frozen=True)
class AstNode:
    """Internal AST node; leaves of the fused graph are the tokens themselves."""
    kind: AstKind
    children: Tuple["AstNode", ...] = ()
    token_span: Tuple[int, int] = (0, 0)
    depth: int = 0
    text: Optional[str] = field(default=None)

    def iter_preorder(self) -> Iterator["AstNode"]:
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))


def lex(source: str) -> List[Token]:
    """
    Tokenize mini-language source by maximal munch.

    Raises:
        UnknownCharacter: At the first character outside the alphabet
    """
    tokens: List[Token] = []
    pos = 0
    while pos < len(source):
        match = _TOKEN_RE.match(source, pos)
        if match is None:
            raise UnknownCharacter(pos, source[pos])
        group = match.lastgroup
        text = match.group()
        pos = match.end()
        if group in ("ws", "comment"):
            continue
        if group == "word":
            kind = TokenKind.KEYWORD if text in KEYWORDS else TokenKind.IDENTIFIER
        elif group == "int":
            kind = TokenKind.INT_LITERAL
        elif group == "op":
            kind = TokenKind.OPERATOR
        else:
            kind = TokenKind.PUNCT
        tokens.append(Token(kind, text, len(tokens)))
    return tokens


class Parser:
    """
    A recursive descent parser producing span-annotated AST nodes.
    """

    def __init__(self, tokens: List[Token]):
        self.tokens = tokens
        self.pos = 0

    @property
    def current(self) -> Optional[Token]:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def _at(self, *texts: str) -> bool:
        tok = self.current
        return tok is not None and tok.kind != TokenKind.IDENTIFIER and tok.text in texts

    def eat(self, text: str) -> Token:
        """Consume the current token if its text matches."""
        tok = self.current
        if tok is None or tok.text != text or tok.kind == TokenKind.IDENTIFIER:
            raise SourceSyntaxError(self.pos, repr(text))
        self.pos += 1
        return tok

    def _node(self, kind: AstKind, start: int, children=(), text=None) -> AstNode:
        return AstNode(kind, tuple(children), (start, self.pos - 1), 0, text)

    def parse_program(self) -> AstNode:
        statements = [self.statement()]
        while self.current is not None:
            statements.append(self.statement())
        return self._node(AstKind.PROGRAM, 0, statements)

    def statement(self) -> AstNode:
        tok = self.current
        if tok is None:
            raise SourceSyntaxError(self.pos, "statement")
        if tok.kind == TokenKind.IDENTIFIER:
            return self.assign()
        if tok.kind == TokenKind.KEYWORD and tok.text == "if":
            return self.if_statement()
        if tok.kind == TokenKind.KEYWORD and tok.text == "while":
            return self.while_statement()
        raise SourceSyntaxError(self.pos, "statement")

    def assign(self) -> AstNode:
        start = self.pos
        target = self.factor()
        self.eat("=")
        value = self.expr()
        return self._node(AstKind.ASSIGN, start, (target, value))

    def if_statement(self) -> AstNode:
        start = self.pos
        self.eat("if")
        children = [self.compare(), self.block()]
        if self._at("else"):
            self.eat("else")
            children.append(self.block())
        return self._node(AstKind.IF, start, children)

    def while_statement(self) -> AstNode:
        start = self.pos
        self.eat("while")
        return self._node(AstKind.WHILE, start, (self.compare(), self.block()))

    def block(self) -> AstNode:
        start = self.pos
        self.eat("{")
        statements = []
        while not self._at("}"):
            if self.current is None:
                raise SourceSyntaxError(self.pos, "'}'")
            statements.append(self.statement())
        self.eat("}")
        return self._node(AstKind.BLOCK, start, statements)

    def compare(self) -> AstNode:
        start = self.pos
        left = self.expr()
        if not self._at(*COMPARE_OPS):
            raise SourceSyntaxError(self.pos, "comparison operator")
        op = self.eat(self.current.text).text
        right = self.expr()
        return self._node(AstKind.COMPARE, start, (left, right), op)

    def expr(self) -> AstNode:
        start = self.pos
        node = self.term()
        while self._at(*ADD_OPS):
            op = self.eat(self.current.text).text
            node = self._node(AstKind.BIN_OP, start, (node, self.term()), op)
        return node

    def term(self) -> AstNode:
        start = self.pos
        node = self.factor()
        while self._at(*MUL_OPS):
            op = self.eat(self.current.text).text
            node = self._node(AstKind.BIN_OP, start, (node, self.factor()), op)
        return node

    def factor(self) -> AstNode:
        tok = self.current
        start = self.pos
        if tok is not None and tok.kind == TokenKind.IDENTIFIER:
            self.pos += 1
            return self._node(AstKind.IDENT, start, text=tok.text)
        if tok is not None and tok.kind == TokenKind.INT_LITERAL:
            self.pos += 1
            return self._node(AstKind.LIT, start, text=tok.text)
        if self._at("("):
            self.eat("(")
            node = self.expr()
            self.eat(")")
            return node
        raise SourceSyntaxError(self.pos, "expression")


def _with_depth(node: AstNode, depth: int) -> AstNode:
    children = tuple(_with_depth(child, depth + 1) for child in node.children)
    return replace(node, children=children, depth=depth)


def parse(tokens: List[Token]) -> AstNode:
    """
    Parse a token list into a Program AST.

    Raises:
        SourceSyntaxError: With the failing token position and what was expected
    """
    if not tokens:
        raise SourceSyntaxError(0, "statement")
    return _with_depth(Parser(tokens).parse_program(), 0)


def parse_source(source: str) -> Tuple[AstNode, List[Token]]:
    tokens = lex(source)
    return parse(tokens), tokens


# Pretty printing

_PRECEDENCE = {"+": 1, "-": 1, "*": 2, "/": 2}


def _expr_text(node: AstNode) -> str:
    if node.kind in (AstKind.IDENT, AstKind.LIT):
        return node.text
    left, right = node.children
    prec = _PRECEDENCE[node.text]
    left_text = _expr_text(left)
    right_text = _expr_text(right)
    if left.kind == AstKind.BIN_OP and _PRECEDENCE[left.text] < prec:
        left_text = f"( {left_text} )"
    if right.kind == AstKind.BIN_OP and _PRECEDENCE[right.text] <= prec:
        right_text = f"( {right_text} )"
    return f"{left_text} {node.text} {right_text}"


def _statement_lines(node: AstNode, indent: int) -> List[str]:
    pad = "    " * indent
    if node.kind == AstKind.ASSIGN:
        target, value = node.children
        return [f"{pad}{target.text} = {_expr_text(value)}"]
    if node.kind in (AstKind.IF, AstKind.WHILE):
        cmp = node.children[0]
        left, right = cmp.children
        keyword = "if" if node.kind == AstKind.IF else "while"
        lines = [f"{pad}{keyword} {_expr_text(left)} {cmp.text} {_expr_text(right)} {{"]
        lines += _block_lines(node.children[1], indent + 1)
        if len(node.children) == 3:
            lines.append(f"{pad}}} else {{")
            lines += _block_lines(node.children[2], indent + 1)
        lines.append(f"{pad}}}")
        return lines
    raise ValueError(f"not a statement: {node.kind}")


def _block_lines(block: AstNode, indent: int) -> List[str]:
    lines: List[str] = []
    for stmt in block.children:
        lines += _statement_lines(stmt, indent)
    return lines


def pretty_print(ast: AstNode) -> str:
    """Canonical source text with minimal parentheses."""
    if ast.kind != AstKind.PROGRAM:
        raise ValueError("pretty_print expects a Program node")
    return "\n".join(_block_lines(ast, 0)) + "\n"
