//! The formula language.
//!
//! ```text
//! stmt   := IDENT '=' expr ';'
//! expr   := term (('+' | '-') term)*
//! term   := factor (('*' | '/') factor)*
//! factor := NUMBER | IDENT | FUNC '(' expr ')' | '-' factor | '(' expr ')'
//!         | factor '^' INT
//! ```
//!
//! Identifiers not bound by an earlier statement are input variables.
//! `#` starts a comment running to the end of the line.

use std::collections::{HashMap, HashSet};
use std::fmt;

use adtool_core::{Graph, Node, NodeRef};

pub const FUNCTIONS: [&str; 9] = [
    "exp", "log", "sqrt", "sin", "cos", "tan", "erfc", "cdf_n", "pdf_n",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "line {}, column {}: {}",
            self.line, self.column, self.message
        )
    }
}

impl std::error::Error for ParseError {}

/// A parsed source file.
#[derive(Debug)]
pub struct Program {
    pub graph: Graph,
    /// Statement names and their nodes, in source order.
    pub statements: Vec<(String, NodeRef)>,
}

impl Program {
    pub fn node(&self, name: &str) -> Option<NodeRef> {
        self.statements
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, r)| *r)
    }

    /// Statements no later statement refers to.
    pub fn sinks(&self) -> Vec<(String, NodeRef)> {
        let mut used = HashSet::new();
        for (_, n) in &self.statements {
            for r in self.graph.topo_order(&[*n]).unwrap_or_default() {
                if r != *n {
                    used.insert(r);
                }
            }
        }
        self.statements
            .iter()
            .filter(|(_, n)| !used.contains(n))
            .cloned()
            .collect()
    }

    /// A human-readable location for node `id`: the statement it defines or
    /// the first statement containing it.
    pub fn describe(&self, id: u32) -> String {
        let Some((target, node)) = self
            .graph
            .nodes()
            .find(|(r, _)| r.id() == id)
            .map(|(r, n)| (r, n.clone()))
        else {
            return format!("node #{id}");
        };
        if let Some((name, _)) = self.statements.iter().find(|(_, n)| *n == target) {
            return format!("`{name}`");
        }
        if let Node::Var(v) = node {
            return format!("variable `{v}`");
        }
        for (name, n) in &self.statements {
            if self
                .graph
                .topo_order(&[*n])
                .unwrap_or_default()
                .contains(&target)
            {
                return format!("{} inside `{name}`", node.op_name());
            }
        }
        format!("node #{id}")
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Number(String),
    Sym(char),
    End,
}

struct Token {
    tok: Tok,
    line: usize,
    column: usize,
}

fn lex(src: &str) -> Result<Vec<Token>, ParseError> {
    let mut out = Vec::new();
    let mut chars = src.chars().peekable();
    let (mut line, mut column) = (1, 1);
    while let Some(&c) = chars.peek() {
        let (l, col) = (line, column);
        if c == '\n' {
            chars.next();
            line += 1;
            column = 1;
            continue;
        }
        if c.is_whitespace() {
            chars.next();
            column += 1;
            continue;
        }
        if c == '#' {
            while chars.peek().is_some_and(|&c| c != '\n') {
                chars.next();
            }
            continue;
        }
        let mut text = String::new();
        let tok = if c.is_ascii_alphabetic() || c == '_' {
            while let Some(&c) = chars
                .peek()
                .filter(|c| c.is_ascii_alphanumeric() || **c == '_')
            {
                text.push(c);
                chars.next();
            }
            Tok::Ident(text.clone())
        } else if c.is_ascii_digit() || c == '.' {
            while let Some(&c) = chars.peek() {
                let exp_sign = (c == '+' || c == '-') && text.ends_with(['e', 'E']);
                if c.is_ascii_digit() || c == '.' || c == 'e' || c == 'E' || exp_sign {
                    text.push(c);
                    chars.next();
                } else {
                    break;
                }
            }
            Tok::Number(text.clone())
        } else if "=;+-*/^()".contains(c) {
            chars.next();
            text.push(c);
            Tok::Sym(c)
        } else {
            return Err(ParseError {
                line: l,
                column: col,
                message: format!("unexpected character `{c}`"),
            });
        };
        column += text.chars().count();
        out.push(Token {
            tok,
            line: l,
            column: col,
        });
    }
    out.push(Token {
        tok: Tok::End,
        line,
        column,
    });
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    graph: Graph,
    bound: HashMap<String, NodeRef>,
    free: HashSet<String>,
}

type PResult<T> = Result<T, ParseError>;

impl Parser {
    fn peek(&self) -> &Tok {
        &self.tokens[self.pos].tok
    }

    fn error<T>(&self, message: impl Into<String>) -> PResult<T> {
        let t = &self.tokens[self.pos];
        Err(ParseError {
            line: t.line,
            column: t.column,
            message: message.into(),
        })
    }

    fn describe(&self) -> String {
        match self.peek() {
            Tok::Ident(s) | Tok::Number(s) => format!("`{s}`"),
            Tok::Sym(c) => format!("`{c}`"),
            Tok::End => "end of input".into(),
        }
    }

    fn expect(&mut self, c: char) -> PResult<()> {
        if *self.peek() == Tok::Sym(c) {
            self.pos += 1;
            Ok(())
        } else {
            self.error(format!("expected `{c}`, found {}", self.describe()))
        }
    }

    fn core<T>(&self, r: adtool_core::Result<T>) -> PResult<T> {
        match r {
            Ok(v) => Ok(v),
            Err(e) => self.error(e.to_string()),
        }
    }

    fn statement(&mut self) -> PResult<(String, NodeRef)> {
        let name = match self.peek().clone() {
            Tok::Ident(name) => name,
            _ => {
                return self.error(format!(
                    "expected a statement name, found {}",
                    self.describe()
                ))
            }
        };
        if FUNCTIONS.contains(&name.as_str()) {
            return self.error(format!("`{name}` is a function name"));
        }
        if self.bound.contains_key(&name) {
            return self.error(format!("`{name}` is already defined"));
        }
        if self.free.contains(&name) {
            return self.error(format!("`{name}` was already used as an input variable"));
        }
        self.pos += 1;
        self.expect('=')?;
        let node = self.expr()?;
        self.expect(';')?;
        self.bound.insert(name.clone(), node);
        Ok((name, node))
    }

    fn expr(&mut self) -> PResult<NodeRef> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Tok::Sym(c @ ('+' | '-')) => *c,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = if op == '+' {
                {
                    let r = self.graph.add(lhs, rhs);
                    self.core(r)?
                }
            } else {
                {
                    let r = self.graph.sub(lhs, rhs);
                    self.core(r)?
                }
            };
        }
    }

    fn term(&mut self) -> PResult<NodeRef> {
        let mut lhs = self.factor()?;
        loop {
            let op = match self.peek() {
                Tok::Sym(c @ ('*' | '/')) => *c,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.factor()?;
            lhs = if op == '*' {
                {
                    let r = self.graph.mul(lhs, rhs);
                    self.core(r)?
                }
            } else {
                {
                    let r = self.graph.div(lhs, rhs);
                    self.core(r)?
                }
            };
        }
    }

    fn factor(&mut self) -> PResult<NodeRef> {
        if *self.peek() == Tok::Sym('-') {
            self.pos += 1;
            let x = self.factor()?;
            return match self.graph.node(x) {
                Ok(Node::Const(c)) => {
                    let r = self.graph.constant(-*c);
                    self.core(r)
                }
                _ => {
                    let r = self.graph.neg(x);
                    self.core(r)
                }
            };
        }
        let mut base = self.primary()?;
        while *self.peek() == Tok::Sym('^') {
            self.pos += 1;
            let negative = *self.peek() == Tok::Sym('-');
            if negative {
                self.pos += 1;
            }
            let n = match self.peek() {
                Tok::Number(s) => s.parse::<i32>().ok(),
                _ => None,
            };
            let Some(n) = n else {
                return self.error(format!(
                    "exponent must be an integer literal, found {}",
                    self.describe()
                ));
            };
            self.pos += 1;
            let r = self.graph.powi(base, if negative { -n } else { n });
            base = self.core(r)?;
        }
        Ok(base)
    }

    fn primary(&mut self) -> PResult<NodeRef> {
        match self.peek().clone() {
            Tok::Number(s) => {
                let Ok(v) = s.parse::<f64>() else {
                    return self.error(format!("malformed number `{s}`"));
                };
                self.pos += 1;
                let r = self.graph.constant(v);
                self.core(r)
            }
            Tok::Sym('(') => {
                self.pos += 1;
                let x = self.expr()?;
                self.expect(')')?;
                Ok(x)
            }
            Tok::Ident(name) => {
                let call = self.tokens[self.pos + 1].tok == Tok::Sym('(');
                if call {
                    if !FUNCTIONS.contains(&name.as_str()) {
                        return self.error(format!("unknown function `{name}`"));
                    }
                    self.pos += 2;
                    let x = self.expr()?;
                    self.expect(')')?;
                    let g = &mut self.graph;
                    let r = match name.as_str() {
                        "exp" => g.exp(x),
                        "log" => g.log(x),
                        "sqrt" => g.sqrt(x),
                        "sin" => g.sin(x),
                        "cos" => g.cos(x),
                        "tan" => g.tan(x),
                        "erfc" => g.erfc(x),
                        "cdf_n" => g.cdf_n(x),
                        _ => g.pdf_n(x),
                    };
                    return self.core(r);
                }
                if FUNCTIONS.contains(&name.as_str()) {
                    return self.error(format!("expected `(` after function `{name}`"));
                }
                if let Some(&n) = self.bound.get(&name) {
                    self.pos += 1;
                    return Ok(n);
                }
                let r = self.graph.variable(&name);
                let n = self.core(r)?;
                self.free.insert(name);
                self.pos += 1;
                Ok(n)
            }
            _ => self.error(format!("expected an expression, found {}", self.describe())),
        }
    }
}

pub fn parse(src: &str) -> Result<Program, ParseError> {
    let tokens = lex(src)?;
    let mut p = Parser {
        tokens,
        pos: 0,
        graph: Graph::new(),
        bound: HashMap::new(),
        free: HashSet::new(),
    };
    let mut statements = Vec::new();
    while *p.peek() != Tok::End {
        statements.push(p.statement()?);
    }
    if statements.is_empty() {
        return p.error("no statements");
    }
    Ok(Program {
        graph: p.graph,
        statements,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product() {
        let p = parse("p = x * y;").unwrap();
        let vars: Vec<&str> = p.graph.variables().map(|(v, _)| v.as_str()).collect();
        assert_eq!(vars, ["x", "y"]);
        let n = p.node("p").unwrap();
        assert!(matches!(
            p.graph.node(n).unwrap(),
            Node::Binary(adtool_core::BinaryOp::Mul, _, _)
        ));
    }

    #[test]
    fn worked_example_graph() {
        let p = parse("r = exp(cos(v1*v2));").unwrap();
        assert_eq!(p.graph.len(), 5);
    }

    #[test]
    fn statements_are_shared() {
        let p = parse("a = x + 1; b = a * a; c = sin(a);").unwrap();
        let a = p.node("a").unwrap();
        let users = p
            .graph
            .nodes()
            .filter(|(_, n)| n.children().any(|c| c == a))
            .count();
        assert_eq!(users, 2);
        let sinks: Vec<String> = p.sinks().into_iter().map(|s| s.0).collect();
        assert_eq!(sinks, ["b", "c"]);
    }

    #[test]
    fn precedence() {
        let p = parse("f = -x^2 + 2*y^-1 - 3;").unwrap();
        let f = p.node("f").unwrap();
        let inputs = [("x", 3.0), ("y", 4.0)]
            .iter()
            .map(|(n, v)| (adtool_core::VarId::new(n).unwrap(), *v))
            .collect();
        let v = p.graph.evaluate(&[f], &inputs).unwrap()[0];
        assert_eq!(v, -9.0 + 0.5 - 3.0);
    }

    #[test]
    fn errors_carry_positions() {
        let e = parse("a = x +;\n").unwrap_err();
        assert_eq!((e.line, e.column), (1, 8));
        let e = parse("a = 1;\nb = foo(a);").unwrap_err();
        assert_eq!((e.line, e.column), (2, 5));
        assert!(e.message.contains("unknown function"));
        let e = parse("a = x ^ 1.5;").unwrap_err();
        assert!(e.message.contains("integer literal"));
        let e = parse("a = x ^ y;").unwrap_err();
        assert!(e.message.contains("integer literal"));
        assert!(parse("a = 1; a = 2;").is_err());
        assert!(parse("a = x; x = 2;").is_err());
        assert!(parse("a = x $ 2;").is_err());
        assert!(parse("a = exp;").is_err());
        assert!(parse("").is_err());
    }

    #[test]
    fn comments_and_scientific_notation() {
        let p = parse("# header\nk = 1.5e-3 * x; # trailing\n").unwrap();
        let k = p.node("k").unwrap();
        let c = p.graph.node(k).unwrap().children().next().unwrap();
        assert_eq!(*p.graph.node(c).unwrap(), Node::Const(1.5e-3));
    }
}
