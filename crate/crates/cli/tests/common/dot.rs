//! Recursive-descent checker for the Graphviz DOT language.
//!
//! Follows the published abstract grammar:
//!
//! ```text
//! graph     : [strict] (graph | digraph) [ID] '{' stmt_list '}'
//! stmt_list : [stmt [';'] stmt_list]
//! stmt      : node_stmt | edge_stmt | attr_stmt | ID '=' ID | subgraph
//! attr_stmt : (graph | node | edge) attr_list
//! attr_list : '[' [a_list] ']' [attr_list]
//! a_list    : ID '=' ID [(';' | ',')] [a_list]
//! edge_stmt : (node_id | subgraph) edgeRHS [attr_list]
//! edgeRHS   : edgeop (node_id | subgraph) [edgeRHS]
//! node_stmt : node_id [attr_list]
//! node_id   : ID [port]
//! port      : ':' ID [':' compass_pt] | ':' compass_pt
//! subgraph  : [subgraph [ID]] '{' stmt_list '}'
//! ```
//!
//! IDs are identifiers, numerals, double-quoted strings (with `\"`
//! escapes and `+` concatenation) or HTML strings. Keywords are
//! case-insensitive; `->` is only legal in digraphs and `--` only in graphs.

#![allow(dead_code)]

use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Id(String),
    LBrace,
    RBrace,
    LBracket,
    RBracket,
    Eq,
    Semi,
    Comma,
    Colon,
    Arrow,
    Line,
}

/// What a parsed document contained, for assertions beyond well-formedness.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct DotGraph {
    pub directed: bool,
    pub strict: bool,
    pub name: Option<String>,
    /// Node statements (not nodes implied by edges), with their attributes.
    pub nodes: BTreeMap<String, BTreeMap<String, String>>,
    /// Each edge hop with the attributes of its statement.
    pub edges: Vec<(String, String, BTreeMap<String, String>)>,
}

impl DotGraph {
    /// Every node named by a node statement or an edge.
    pub fn all_nodes(&self) -> std::collections::BTreeSet<String> {
        let mut all: std::collections::BTreeSet<String> = self.nodes.keys().cloned().collect();
        for (a, b, _) in &self.edges {
            all.insert(a.clone());
            all.insert(b.clone());
        }
        all
    }
}

fn tokenize(src: &str) -> Result<Vec<Tok>, String> {
    let chars: Vec<char> = src.chars().collect();
    let mut i = 0;
    let mut out = Vec::new();
    let mut line_start = true;
    while i < chars.len() {
        let c = chars[i];
        if c == '\n' {
            line_start = true;
            i += 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        // preprocessor-style lines are ignored when they start with '#'
        if c == '#' && line_start {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
            continue;
        }
        line_start = false;
        if c == '/' && chars.get(i + 1) == Some(&'/') {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
            continue;
        }
        if c == '/' && chars.get(i + 1) == Some(&'*') {
            i += 2;
            loop {
                if i + 1 >= chars.len() {
                    return Err("unterminated comment".into());
                }
                if chars[i] == '*' && chars[i + 1] == '/' {
                    i += 2;
                    break;
                }
                i += 1;
            }
            continue;
        }
        match c {
            '{' => out.push(Tok::LBrace),
            '}' => out.push(Tok::RBrace),
            '[' => out.push(Tok::LBracket),
            ']' => out.push(Tok::RBracket),
            '=' => out.push(Tok::Eq),
            ';' => out.push(Tok::Semi),
            ',' => out.push(Tok::Comma),
            ':' => out.push(Tok::Colon),
            '-' if chars.get(i + 1) == Some(&'>') => {
                out.push(Tok::Arrow);
                i += 1;
            }
            '-' if chars.get(i + 1) == Some(&'-') => {
                out.push(Tok::Line);
                i += 1;
            }
            '"' => {
                let mut s = String::new();
                i += 1;
                loop {
                    match chars.get(i) {
                        None => return Err("unterminated string".into()),
                        Some('"') => break,
                        Some('\\') if chars.get(i + 1) == Some(&'"') => {
                            s.push('"');
                            i += 2;
                        }
                        Some('\\') if chars.get(i + 1) == Some(&'\n') => i += 2,
                        Some(&ch) => {
                            s.push(ch);
                            i += 1;
                        }
                    }
                }
                out.push(Tok::Id(s));
            }
            '<' => {
                let mut depth = 0usize;
                let mut s = String::new();
                loop {
                    match chars.get(i) {
                        None => return Err("unterminated HTML string".into()),
                        Some('<') => depth += 1,
                        Some('>') => depth -= 1,
                        _ => {}
                    }
                    s.push(chars[i]);
                    if depth == 0 {
                        break;
                    }
                    i += 1;
                }
                out.push(Tok::Id(s));
            }
            c if c.is_ascii_digit() || c == '.' || c == '-' => {
                let start = i;
                if c == '-' {
                    i += 1;
                }
                let mut dots = 0;
                let mut digits = 0;
                while let Some(&d) = chars.get(i) {
                    if d == '.' {
                        dots += 1;
                    } else if d.is_ascii_digit() {
                        digits += 1;
                    } else {
                        break;
                    }
                    i += 1;
                }
                if dots > 1 || digits == 0 {
                    return Err(format!("malformed numeral at offset {start}"));
                }
                if chars.get(i).is_some_and(|d| d.is_alphabetic() || *d == '_') {
                    return Err(format!("identifier may not start with a digit at offset {start}"));
                }
                out.push(Tok::Id(chars[start..i].iter().collect()));
                continue;
            }
            c if c.is_alphabetic() || c == '_' || !c.is_ascii() => {
                let start = i;
                while chars.get(i).is_some_and(|d| d.is_alphanumeric() || *d == '_' || !d.is_ascii()) {
                    i += 1;
                }
                out.push(Tok::Id(chars[start..i].iter().collect()));
                continue;
            }
            '+' => {
                // concatenation of two quoted strings
                match (out.pop(), chars[i + 1..].iter().position(|c| !c.is_whitespace())) {
                    (Some(Tok::Id(prev)), Some(off)) if chars[i + 1 + off] == '"' => {
                        let rest = &src[src.char_indices().nth(i + 1 + off).unwrap().0..];
                        let mut sub = tokenize(rest)?.into_iter();
                        let Some(Tok::Id(next)) = sub.next() else {
                            return Err("`+` must join two strings".into());
                        };
                        out.push(Tok::Id(prev + &next));
                        out.extend(sub);
                        return Ok(out);
                    }
                    _ => return Err("`+` must join two strings".into()),
                }
            }
            other => return Err(format!("unexpected character {other:?}")),
        }
        i += 1;
    }
    Ok(out)
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
    graph: DotGraph,
}

fn keyword(t: Option<&Tok>, kw: &str) -> bool {
    matches!(t, Some(Tok::Id(s)) if s.eq_ignore_ascii_case(kw))
}

const KEYWORDS: [&str; 6] = ["strict", "graph", "digraph", "node", "edge", "subgraph"];
const COMPASS: [&str; 10] = ["n", "ne", "e", "se", "s", "sw", "w", "nw", "c", "_"];

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn peek_at(&self, n: usize) -> Option<&Tok> {
        self.toks.get(self.pos + n)
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn expect(&mut self, want: Tok) -> Result<(), String> {
        match self.bump() {
            Some(t) if t == want => Ok(()),
            other => Err(format!("expected {want:?}, found {other:?} at token {}", self.pos - 1)),
        }
    }

    /// A non-keyword ID.
    fn id(&mut self) -> Result<String, String> {
        match self.bump() {
            Some(Tok::Id(s)) if !KEYWORDS.iter().any(|k| s.eq_ignore_ascii_case(k)) => Ok(s),
            other => Err(format!("expected an ID, found {other:?} at token {}", self.pos - 1)),
        }
    }

    fn graph(&mut self) -> Result<(), String> {
        if keyword(self.peek(), "strict") {
            self.bump();
            self.graph.strict = true;
        }
        if keyword(self.peek(), "digraph") {
            self.graph.directed = true;
        } else if !keyword(self.peek(), "graph") {
            return Err("expected `graph` or `digraph`".into());
        }
        self.bump();
        if matches!(self.peek(), Some(Tok::Id(_))) {
            self.graph.name = Some(self.id()?);
        }
        self.expect(Tok::LBrace)?;
        self.stmt_list()?;
        self.expect(Tok::RBrace)?;
        if self.pos != self.toks.len() {
            return Err(format!("trailing tokens after the graph: {:?}", &self.toks[self.pos..]));
        }
        Ok(())
    }

    fn stmt_list(&mut self) -> Result<(), String> {
        while !matches!(self.peek(), Some(Tok::RBrace) | None) {
            self.stmt()?;
            if self.peek() == Some(&Tok::Semi) {
                self.bump();
            }
        }
        Ok(())
    }

    fn stmt(&mut self) -> Result<(), String> {
        let t = self.peek().cloned();
        if keyword(t.as_ref(), "graph") || keyword(t.as_ref(), "node") || keyword(t.as_ref(), "edge") {
            self.bump();
            if self.peek() != Some(&Tok::LBracket) {
                return Err("attribute statement needs an attribute list".into());
            }
            self.attr_list()?;
            return Ok(());
        }
        if matches!(t, Some(Tok::Id(_))) && self.peek_at(1) == Some(&Tok::Eq) {
            self.id()?;
            self.bump();
            self.id()?;
            return Ok(());
        }
        let first = self.node_or_subgraph()?;
        if matches!(self.peek(), Some(Tok::Arrow | Tok::Line)) {
            let mut hops = Vec::new();
            let mut from = first;
            while let Some(op) = self.peek().cloned().filter(|t| matches!(t, Tok::Arrow | Tok::Line)) {
                match (op, self.graph.directed) {
                    (Tok::Arrow, false) => return Err("`->` in an undirected graph".into()),
                    (Tok::Line, true) => return Err("`--` in a directed graph".into()),
                    _ => {}
                }
                self.bump();
                let to = self.node_or_subgraph()?;
                for a in &from {
                    for b in &to {
                        hops.push((a.clone(), b.clone()));
                    }
                }
                from = to;
            }
            let attrs = if self.peek() == Some(&Tok::LBracket) {
                self.attr_list()?
            } else {
                BTreeMap::new()
            };
            for (a, b) in hops {
                self.graph.edges.push((a, b, attrs.clone()));
            }
            return Ok(());
        }
        let attrs = if self.peek() == Some(&Tok::LBracket) {
            self.attr_list()?
        } else {
            BTreeMap::new()
        };
        if let [single] = first.as_slice() {
            self.graph.nodes.entry(single.clone()).or_default().extend(attrs);
        }
        Ok(())
    }

    /// A node id (possibly with a port) or a subgraph; returns the node
    /// names it denotes.
    fn node_or_subgraph(&mut self) -> Result<Vec<String>, String> {
        if keyword(self.peek(), "subgraph") || self.peek() == Some(&Tok::LBrace) {
            if keyword(self.peek(), "subgraph") {
                self.bump();
                if matches!(self.peek(), Some(Tok::Id(_))) {
                    self.id()?;
                }
            }
            let before: std::collections::BTreeSet<String> = self.graph.all_nodes();
            self.expect(Tok::LBrace)?;
            self.stmt_list()?;
            self.expect(Tok::RBrace)?;
            return Ok(self.graph.all_nodes().difference(&before).cloned().collect());
        }
        let id = self.id()?;
        if self.peek() == Some(&Tok::Colon) {
            self.bump();
            let port = self.id()?;
            if self.peek() == Some(&Tok::Colon) {
                self.bump();
                let pt = self.id()?;
                if !COMPASS.contains(&pt.as_str()) {
                    return Err(format!("`{pt}` is not a compass point"));
                }
            }
            let _ = port;
        }
        Ok(vec![id])
    }

    fn attr_list(&mut self) -> Result<BTreeMap<String, String>, String> {
        let mut attrs = BTreeMap::new();
        while self.peek() == Some(&Tok::LBracket) {
            self.bump();
            while self.peek() != Some(&Tok::RBracket) {
                let k = self.id()?;
                self.expect(Tok::Eq)?;
                let v = self.id()?;
                attrs.insert(k, v);
                if matches!(self.peek(), Some(Tok::Semi | Tok::Comma)) {
                    self.bump();
                }
            }
            self.expect(Tok::RBracket)?;
        }
        Ok(attrs)
    }
}

/// Parses `src` as a single DOT graph.
pub fn parse(src: &str) -> Result<DotGraph, String> {
    let mut p = Parser {
        toks: tokenize(src)?,
        pos: 0,
        graph: DotGraph::default(),
    };
    p.graph()?;
    Ok(p.graph)
}

#[test]
fn checker_accepts_grammar_features() {
    let g = parse(
        "/* c */ strict digraph \"G\" {\n# line\n graph [rankdir=LR]; node [shape=box, style=filled]\n a:p:ne -> b -> {c d} [style=dashed];\n x = y\n subgraph s { e }\n \"q\\\"x\" ; n1 [label=<<b>hi</b>>] // tail\n -1.5 -> .5\n}",
    )
    .unwrap();
    assert!(g.directed && g.strict);
    assert_eq!(g.edges.len(), 4);
    assert_eq!(g.edges[1].2["style"], "dashed");
    assert!(g.nodes.contains_key("q\"x"));
    assert_eq!(parse("graph { a -- b }").unwrap().edges.len(), 1);
    assert_eq!(parse("digraph { \"a\" + \"b\" -> c }").unwrap().edges[0].0, "ab");
}

#[test]
fn checker_rejects_malformed_documents() {
    for bad in [
        "",
        "digraph",
        "digraph {",
        "digraph { a -> }",
        "digraph { a -- b }",
        "graph { a -> b }",
        "digraph { a [label] }",
        "digraph { a [label=\"x] }",
        "digraph { node }",
        "digraph { 1abc }",
        "digraph { a:b:north }",
        "digraph { } extra",
        "digraph { a -> b; ] }",
        "tree { a }",
        "digraph { edge -> b }",
    ] {
        assert!(parse(bad).is_err(), "accepted {bad:?}");
    }
}
