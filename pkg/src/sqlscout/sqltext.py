"""Lightweight SQL text scanning: quote/comment aware, no full parse.

These helpers walk SQL character by character, skipping string literals
('...', "...", `...`, [...]), line comments (-- ...) and block comments
(/* ... */). They are deliberately not a grammar: only enough structure to
find top-level keywords and paren groups.
"""

from __future__ import annotations

_OPENERS = {"'": "'", '"': '"', "`": "`", "[": "]"}


def skip_literal_or_comment(sql: str, i: int) -> int:
    """If sql[i] starts a literal or comment, return the index after it.

    Returns i unchanged when sql[i] is plain text. An unterminated literal or
    comment consumes the rest of the string.
    """
    n = len(sql)
    ch = sql[i]
    if ch in _OPENERS:
        closer = _OPENERS[ch]
        j = i + 1
        while j < n:
            if sql[j] == closer:
                # '' and "" escape the quote by doubling (not for [..])
                if closer in ("'", '"', "`") and j + 1 < n and sql[j + 1] == closer:
                    j += 2
                    continue
                return j + 1
            j += 1
        return n
    if ch == "-" and sql.startswith("--", i):
        j = sql.find("\n", i)
        return n if j < 0 else j + 1
    if ch == "/" and sql.startswith("/*", i):
        j = sql.find("*/", i + 2)
        return n if j < 0 else j + 2
    return i


def _is_word_char(ch: str) -> bool:
    return ch.isalnum() or ch == "_"


def scan_top_level(sql: str, start: int = 0, base_depth: int = 0):
    """Yield (index, token) for words and parens outside literals/comments.

    Tokens are uppercased words, "(" and ")". ``base_depth`` sets the paren
    depth considered "top level"; tokens at deeper nesting are not yielded,
    but parens adjusting the depth are.
    """
    i = start
    depth = base_depth
    n = len(sql)
    while i < n:
        j = skip_literal_or_comment(sql, i)
        if j != i:
            i = j
            continue
        ch = sql[i]
        if ch == "(":
            if depth == base_depth:
                yield i, "("
            depth += 1
            i += 1
            continue
        if ch == ")":
            depth -= 1
            if depth == base_depth:
                yield i, ")"
            if depth < base_depth:
                yield i, ")-close"
                return
            i += 1
            continue
        if depth == base_depth and (ch.isalpha() or ch == "_"):
            j = i + 1
            while j < n and _is_word_char(sql[j]):
                j += 1
            yield i, sql[i:j].upper()
            i = j
            continue
        if depth == base_depth and ch == ";":
            yield i, ";"
        i += 1


def first_keyword(sql: str) -> str | None:
    """First word of the statement, uppercased, descending through leading parens."""
    i = 0
    n = len(sql)
    while i < n:
        ch = sql[i]
        if ch.isspace() or ch == "(":
            i += 1
            continue
        if sql.startswith("--", i) or sql.startswith("/*", i):
            i = skip_literal_or_comment(sql, i)
            continue
        if ch.isalpha() or ch == "_":
            word, _ = _word_at(sql, i)
            return word
        return None
    return None


def single_statement_body(sql: str) -> str | None:
    """Return the statement body if sql holds exactly one statement, else None.

    A trailing semicolon is allowed; anything significant after it is not.
    """
    semi = None
    for idx, tok in scan_top_level(sql):
        if semi is not None:
            return None  # significant token after the first semicolon
        if tok == ";":
            semi = idx
    return sql if semi is None else sql[:semi]


def matching_paren(sql: str, open_idx: int) -> int | None:
    """Index of the ')' matching the '(' at open_idx, or None."""
    if open_idx >= len(sql) or sql[open_idx] != "(":
        return None
    depth = 0
    i = open_idx
    n = len(sql)
    while i < n:
        j = skip_literal_or_comment(sql, i)
        if j != i:
            i = j
            continue
        if sql[i] == "(":
            depth += 1
        elif sql[i] == ")":
            depth -= 1
            if depth == 0:
                return i
        i += 1
    return None


def _skip_insignificant(sql: str, i: int) -> int:
    n = len(sql)
    while i < n:
        if sql[i].isspace():
            i += 1
            continue
        j = skip_literal_or_comment(sql, i)
        if j != i and (sql.startswith("--", i) or sql.startswith("/*", i)):
            i = j
            continue
        return i
    return n


def _word_at(sql: str, i: int) -> tuple[str, int]:
    """Word starting at i (uppercased) and the index just past it."""
    j = i
    n = len(sql)
    while j < n and _is_word_char(sql[j]):
        j += 1
    return sql[i:j].upper(), j


_SET_OPERATORS = {"UNION", "EXCEPT", "INTERSECT"}


def locate_select_list(sql: str) -> tuple[int, int] | None:
    """Locate the outermost select-list of a statement.

    Returns (start, end) character offsets: the span between the outermost
    SELECT keyword (plus an optional DISTINCT/ALL quantifier) and the
    top-level FROM of that select. Handles a leading WITH clause and a
    statement wrapped in parentheses (set-operation branches). Returns None
    when no outermost SELECT ... FROM shape can be found.
    """
    i = _skip_insignificant(sql, 0)
    n = len(sql)
    if i >= n:
        return None

    # Leading WITH: consume each "name [(cols)] AS (...)" block.
    word, j = _word_at(sql, i)
    if word == "WITH":
        i = _skip_insignificant(sql, j)
        word, j = _word_at(sql, i)
        if word == "RECURSIVE":
            i = _skip_insignificant(sql, j)
        while i < n:
            _, j = _word_at(sql, i)  # CTE name
            if j == i:
                return None
            i = _skip_insignificant(sql, j)
            if i < n and sql[i] == "(":  # optional column list
                close = matching_paren(sql, i)
                if close is None:
                    return None
                i = _skip_insignificant(sql, close + 1)
            word, j = _word_at(sql, i)
            if word != "AS":
                return None
            i = _skip_insignificant(sql, j)
            # optional [NOT] MATERIALIZED
            word2, j2 = _word_at(sql, i)
            if word2 == "NOT":
                i = _skip_insignificant(sql, j2)
                word2, j2 = _word_at(sql, i)
            if word2 == "MATERIALIZED":
                i = _skip_insignificant(sql, j2)
            if i >= n or sql[i] != "(":
                return None
            close = matching_paren(sql, i)
            if close is None:
                return None
            i = _skip_insignificant(sql, close + 1)
            if i < n and sql[i] == ",":
                i = _skip_insignificant(sql, i + 1)
                continue
            break

    # A parenthesized set-operation branch: descend into leading groups.
    while i < n and sql[i] == "(":
        i = _skip_insignificant(sql, i + 1)

    word, j = _word_at(sql, i)
    if word != "SELECT":
        return None
    list_start = _skip_insignificant(sql, j)
    quant, jq = _word_at(sql, list_start)
    if quant in ("DISTINCT", "ALL"):
        list_start = _skip_insignificant(sql, jq)

    # Find the top-level FROM of this select; stop at set operators or the
    # close of an enclosing group.
    for idx, tok in scan_top_level(sql, start=list_start):
        if tok == "FROM":
            return list_start, idx
        if tok in _SET_OPERATORS or tok == ";" or tok == ")-close":
            return None
    return None
