//! EBNF grammars compiled into character-level masking automata.
//!
//! The supported dialect covers the constructs the constrained-decoding
//! workflow needs: rule definitions (optionally prefixed `?`), alternation,
//! parenthesized groups, double-quoted literals, character ranges
//! (`"0".."9"`), and bounded repetition (`sym~2`, `sym~1..2`). Grammars must
//! be non-recursive; a non-recursive grammar denotes a finite (hence
//! regular) language, which compiles to an exact DFA for token masking.
//!
//! Alternatives that reference an undefined nonterminal are pruned with a
//! warning instead of failing, so a grammar may carry a dangling branch
//! without breaking the rest of the rule. A rule left with no alternatives
//! is still an error.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Tokenizer;

#[derive(Debug, Error, PartialEq)]
pub enum GrammarError {
    #[error("syntax error at line {line}, column {col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("undefined nonterminal `{0}`")]
    UndefinedNonterminal(String),
    #[error("unsupported construct: {0}")]
    Unsupported(String),
    #[error("grammar text is empty")]
    Empty,
}

// ---------------------------------------------------------------------------
// Grammar AST
// ---------------------------------------------------------------------------

/// One symbol inside an alternative.
#[derive(Debug, Clone, PartialEq)]
pub enum Symbol {
    /// Quoted literal, matched character by character.
    Literal(String),
    /// Inclusive character range such as `"0".."9"`.
    Range(char, char),
    /// Reference to another rule.
    RuleRef(String),
    /// Parenthesized group of alternatives.
    Group(Vec<Vec<Symbol>>),
    /// `inner~min..max` (with `min == max` for the `~n` form).
    Repeat {
        inner: Box<Symbol>,
        min: usize,
        max: usize,
    },
}

/// Parsed grammar: rules as alternatives of symbol sequences.
#[derive(Debug, Clone)]
pub struct Grammar {
    pub start: String,
    pub rules: BTreeMap<String, Vec<Vec<Symbol>>>,
    /// Pruned-alternative notes emitted during validation.
    pub warnings: Vec<String>,
}

/// Parse EBNF text into a [`Grammar`].
///
/// The first rule is the start symbol. Alternatives referencing undefined
/// nonterminals are pruned (with a warning); if pruning empties a rule the
/// parse fails with [`GrammarError::UndefinedNonterminal`].
pub fn parse_ebnf(text: &str) -> Result<Grammar, GrammarError> {
    if text.trim().is_empty() {
        return Err(GrammarError::Empty);
    }

    // A rule body may continue onto following lines that start with `|`.
    let mut joined: Vec<(usize, String)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim_end();
        let trimmed = line.trim_start();
        if trimmed.is_empty() || trimmed.starts_with("//") {
            continue;
        }
        if trimmed.starts_with('|') {
            match joined.last_mut() {
                Some((_, prev)) => {
                    prev.push(' ');
                    prev.push_str(trimmed);
                }
                None => {
                    return Err(GrammarError::Syntax {
                        line: idx + 1,
                        col: 1,
                        msg: "continuation `|` before any rule".into(),
                    })
                }
            }
        } else {
            joined.push((idx + 1, line.to_string()));
        }
    }

    let mut start = None;
    let mut rules: BTreeMap<String, Vec<Vec<Symbol>>> = BTreeMap::new();
    for (line_no, line) in joined {
        let Some(colon) = find_rule_colon(&line) else {
            return Err(GrammarError::Syntax {
                line: line_no,
                col: 1,
                msg: "expected `name: body`".into(),
            });
        };
        let mut name = line[..colon].trim();
        name = name.strip_prefix('?').unwrap_or(name).trim();
        if name.is_empty() || !name.chars().all(|c| c.is_alphanumeric() || c == '_') {
            return Err(GrammarError::Syntax {
                line: line_no,
                col: 1,
                msg: format!("bad rule name `{name}`"),
            });
        }
        let body = &line[colon + 1..];
        let alternatives = parse_alternatives(body, line_no, colon + 2)?;
        if start.is_none() {
            start = Some(name.to_string());
        }
        rules.insert(name.to_string(), alternatives);
    }

    let start = start.ok_or(GrammarError::Empty)?;
    let mut grammar = Grammar {
        start,
        rules,
        warnings: Vec::new(),
    };
    prune_undefined(&mut grammar)?;
    Ok(grammar)
}

/// Locate the `:` that separates a rule name from its body (not inside quotes).
fn find_rule_colon(line: &str) -> Option<usize> {
    let mut in_quote = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => in_quote = !in_quote,
            ':' if !in_quote => return Some(i),
            _ => {}
        }
    }
    None
}

struct SymbolParser<'a> {
    chars: Vec<char>,
    pos: usize,
    line: usize,
    col_base: usize,
    text: &'a str,
}

impl<'a> SymbolParser<'a> {
    fn new(text: &'a str, line: usize, col_base: usize) -> Self {
        Self {
            chars: text.chars().collect(),
            pos: 0,
            line,
            col_base,
            text,
        }
    }

    fn err(&self, msg: impl Into<String>) -> GrammarError {
        GrammarError::Syntax {
            line: self.line,
            col: self.col_base + self.pos,
            msg: msg.into(),
        }
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek();
        if c.is_some() {
            self.pos += 1;
        }
        c
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(c) if c.is_whitespace()) {
            self.pos += 1;
        }
    }

    fn alternatives(&mut self, in_group: bool) -> Result<Vec<Vec<Symbol>>, GrammarError> {
        let mut alts = vec![Vec::new()];
        loop {
            self.skip_ws();
            match self.peek() {
                None => break,
                Some('|') => {
                    self.bump();
                    alts.push(Vec::new());
                }
                Some(')') if in_group => break,
                Some(_) => {
                    let sym = self.symbol()?;
                    alts.last_mut().expect("non-empty alts").push(sym);
                }
            }
        }
        if alts.iter().any(Vec::is_empty) && alts.len() > 1 {
            return Err(self.err("empty alternative"));
        }
        Ok(alts)
    }

    fn symbol(&mut self) -> Result<Symbol, GrammarError> {
        let base = self.atom()?;
        self.skip_ws();
        if self.peek() == Some('~') {
            self.bump();
            let min = self.number()?;
            let max = if self.peek() == Some('.') {
                self.expect('.')?;
                self.expect('.')?;
                self.number()?
            } else {
                min
            };
            if max < min {
                return Err(self.err(format!("repetition bound {max} < {min}")));
            }
            return Ok(Symbol::Repeat {
                inner: Box::new(base),
                min,
                max,
            });
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Symbol, GrammarError> {
        self.skip_ws();
        match self.peek() {
            Some('"') => {
                let lit = self.quoted()?;
                self.skip_ws();
                // `"a".."z"` range form.
                if self.peek() == Some('.') && self.chars.get(self.pos + 1) == Some(&'.') {
                    self.pos += 2;
                    self.skip_ws();
                    if self.peek() != Some('"') {
                        return Err(self.err("expected quoted upper bound after `..`"));
                    }
                    let hi = self.quoted()?;
                    let (lo_c, hi_c) = match (single_char(&lit), single_char(&hi)) {
                        (Some(a), Some(b)) => (a, b),
                        _ => return Err(self.err("range bounds must be single characters")),
                    };
                    if hi_c < lo_c {
                        return Err(self.err("descending character range"));
                    }
                    return Ok(Symbol::Range(lo_c, hi_c));
                }
                if lit.is_empty() {
                    return Err(self.err("empty literal"));
                }
                Ok(Symbol::Literal(lit))
            }
            Some('(') => {
                self.bump();
                let alts = self.alternatives(true)?;
                if self.peek() != Some(')') {
                    return Err(self.err("unclosed `(`"));
                }
                self.bump();
                Ok(Symbol::Group(alts))
            }
            Some(c) if c.is_alphanumeric() || c == '_' => {
                let mut name = String::new();
                while matches!(self.peek(), Some(c) if c.is_alphanumeric() || c == '_') {
                    name.push(self.bump().expect("peeked"));
                }
                Ok(Symbol::RuleRef(name))
            }
            Some(c) => Err(self.err(format!("unexpected character `{c}`"))),
            None => Err(self.err("unexpected end of rule body")),
        }
    }

    fn quoted(&mut self) -> Result<String, GrammarError> {
        self.expect('"')?;
        let mut out = String::new();
        loop {
            match self.bump() {
                Some('"') => return Ok(out),
                Some('\\') => match self.bump() {
                    Some('n') => out.push('\n'),
                    Some('t') => out.push('\t'),
                    Some(c) => out.push(c),
                    None => return Err(self.err("dangling escape")),
                },
                Some(c) => out.push(c),
                None => return Err(self.err(format!("unterminated string in `{}`", self.text))),
            }
        }
    }

    fn number(&mut self) -> Result<usize, GrammarError> {
        self.skip_ws();
        let mut digits = String::new();
        while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
            digits.push(self.bump().expect("peeked"));
        }
        digits
            .parse()
            .map_err(|_| self.err("expected repetition count"))
    }

    fn expect(&mut self, c: char) -> Result<(), GrammarError> {
        if self.bump() == Some(c) {
            Ok(())
        } else {
            Err(self.err(format!("expected `{c}`")))
        }
    }
}

fn parse_alternatives(
    body: &str,
    line: usize,
    col_base: usize,
) -> Result<Vec<Vec<Symbol>>, GrammarError> {
    let mut parser = SymbolParser::new(body, line, col_base);
    let alts = parser.alternatives(false)?;
    if alts.len() == 1 && alts[0].is_empty() {
        return Err(parser.err("rule has no body"));
    }
    Ok(alts)
}

fn single_char(s: &str) -> Option<char> {
    let mut it = s.chars();
    match (it.next(), it.next()) {
        (Some(c), None) => Some(c),
        _ => None,
    }
}

fn references(symbol: &Symbol, out: &mut BTreeSet<String>) {
    match symbol {
        Symbol::RuleRef(name) => {
            out.insert(name.clone());
        }
        Symbol::Group(alts) => {
            for alt in alts {
                for sym in alt {
                    references(sym, out);
                }
            }
        }
        Symbol::Repeat { inner, .. } => references(inner, out),
        Symbol::Literal(_) | Symbol::Range(..) => {}
    }
}

/// Drop alternatives that reference undefined nonterminals, recording a
/// warning per pruned branch. Erroring out only when a rule loses every
/// alternative keeps grammars with stray branches usable.
fn prune_undefined(grammar: &mut Grammar) -> Result<(), GrammarError> {
    if !grammar.rules.contains_key(&grammar.start) {
        return Err(GrammarError::UndefinedNonterminal(grammar.start.clone()));
    }
    let defined: BTreeSet<String> = grammar.rules.keys().cloned().collect();
    let mut warnings = Vec::new();
    let mut emptied: Option<String> = None;
    for (name, alts) in &mut grammar.rules {
        let mut first_missing = None;
        alts.retain(|alt| {
            let mut refs = BTreeSet::new();
            for sym in alt {
                references(sym, &mut refs);
            }
            let missing: Vec<&String> = refs.iter().filter(|r| !defined.contains(*r)).collect();
            if missing.is_empty() {
                return true;
            }
            if first_missing.is_none() {
                first_missing = Some(missing[0].clone());
            }
            warnings.push(format!(
                "rule `{name}`: pruned alternative referencing undefined {}",
                missing
                    .iter()
                    .map(|m| format!("`{m}`"))
                    .collect::<Vec<_>>()
                    .join(", ")
            ));
            false
        });
        if alts.is_empty() {
            if let Some(missing) = first_missing {
                emptied.get_or_insert(missing);
            }
        }
    }
    grammar.warnings.extend(warnings);
    if let Some(name) = emptied {
        return Err(GrammarError::UndefinedNonterminal(name));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Compilation to a DFA
// ---------------------------------------------------------------------------

/// Deterministic character-level automaton with canonical state numbering.
///
/// State 0 is the start state. `must_continue` marks states where input is
/// mandatory (every non-accepting state of a trim DFA).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrammarAutomaton {
    pub states: Vec<DfaState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DfaState {
    pub transitions: BTreeMap<char, usize>,
    pub accepting: bool,
    pub must_continue: bool,
}

/// Token mask for one automaton state: which vocabulary tokens may be
/// emitted next, and whether ending the output is allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMask {
    pub allowed: Vec<bool>,
    pub end_allowed: bool,
}

impl GrammarAutomaton {
    pub const START: usize = 0;

    /// Step one character; `None` when no transition exists.
    pub fn step(&self, state: usize, c: char) -> Option<usize> {
        self.states[state].transitions.get(&c).copied()
    }

    /// Walk a whole string from a state.
    pub fn walk(&self, mut state: usize, text: &str) -> Option<usize> {
        for c in text.chars() {
            state = self.step(state, c)?;
        }
        Some(state)
    }

    /// Whether the automaton accepts `text` from the start state.
    pub fn accepts(&self, text: &str) -> bool {
        self.walk(Self::START, text)
            .is_some_and(|s| self.states[s].accepting)
    }
}

/// Compile a non-recursive grammar into an exact DFA.
///
/// Recursion (direct or indirect) is rejected with
/// [`GrammarError::Unsupported`]: it is the one construct that could demand
/// unbounded nesting, and the grammars this crate consumes are finite.
pub fn compile(grammar: &Grammar) -> Result<GrammarAutomaton, GrammarError> {
    check_nonrecursive(grammar)?;
    let nfa = build_nfa(grammar)?;
    Ok(determinize(&nfa))
}

fn check_nonrecursive(grammar: &Grammar) -> Result<(), GrammarError> {
    // DFS over the rule-reference graph looking for a cycle.
    fn visit(
        name: &str,
        grammar: &Grammar,
        visiting: &mut HashSet<String>,
        done: &mut HashSet<String>,
    ) -> Result<(), GrammarError> {
        if done.contains(name) {
            return Ok(());
        }
        if !visiting.insert(name.to_string()) {
            return Err(GrammarError::Unsupported(format!(
                "recursive rule `{name}` requires unbounded nesting"
            )));
        }
        if let Some(alts) = grammar.rules.get(name) {
            let mut refs = BTreeSet::new();
            for alt in alts {
                for sym in alt {
                    references(sym, &mut refs);
                }
            }
            for r in refs {
                visit(&r, grammar, visiting, done)?;
            }
        }
        visiting.remove(name);
        done.insert(name.to_string());
        Ok(())
    }
    let mut visiting = HashSet::new();
    let mut done = HashSet::new();
    visit(&grammar.start, grammar, &mut visiting, &mut done)
}

/// Thompson-style NFA with epsilon transitions.
struct Nfa {
    // transitions[state] = (char -> targets), plus epsilon edges.
    transitions: Vec<BTreeMap<char, Vec<usize>>>,
    epsilon: Vec<Vec<usize>>,
    accept: usize,
}

impl Nfa {
    fn new() -> Self {
        Self {
            transitions: Vec::new(),
            epsilon: Vec::new(),
            accept: 0,
        }
    }

    fn add_state(&mut self) -> usize {
        self.transitions.push(BTreeMap::new());
        self.epsilon.push(Vec::new());
        self.transitions.len() - 1
    }

    fn add_char(&mut self, from: usize, c: char, to: usize) {
        self.transitions[from].entry(c).or_default().push(to);
    }

    fn add_eps(&mut self, from: usize, to: usize) {
        self.epsilon[from].push(to);
    }
}

fn build_nfa(grammar: &Grammar) -> Result<Nfa, GrammarError> {
    let mut nfa = Nfa::new();
    let start = nfa.add_state();
    let accept = nfa.add_state();
    nfa.accept = accept;
    let start_alts = grammar
        .rules
        .get(&grammar.start)
        .ok_or_else(|| GrammarError::UndefinedNonterminal(grammar.start.clone()))?;
    wire_alternatives(&mut nfa, grammar, start_alts, start, accept)?;
    Ok(nfa)
}

fn wire_alternatives(
    nfa: &mut Nfa,
    grammar: &Grammar,
    alts: &[Vec<Symbol>],
    from: usize,
    to: usize,
) -> Result<(), GrammarError> {
    for alt in alts {
        let mut cursor = from;
        for (i, sym) in alt.iter().enumerate() {
            let next = if i + 1 == alt.len() {
                to
            } else {
                nfa.add_state()
            };
            wire_symbol(nfa, grammar, sym, cursor, next)?;
            cursor = next;
        }
        if alt.is_empty() {
            nfa.add_eps(from, to);
        }
    }
    Ok(())
}

fn wire_symbol(
    nfa: &mut Nfa,
    grammar: &Grammar,
    sym: &Symbol,
    from: usize,
    to: usize,
) -> Result<(), GrammarError> {
    match sym {
        Symbol::Literal(text) => {
            let mut cursor = from;
            let chars: Vec<char> = text.chars().collect();
            for (i, c) in chars.iter().enumerate() {
                let next = if i + 1 == chars.len() {
                    to
                } else {
                    nfa.add_state()
                };
                nfa.add_char(cursor, *c, next);
                cursor = next;
            }
        }
        Symbol::Range(lo, hi) => {
            for c in (*lo as u32)..=(*hi as u32) {
                if let Some(c) = char::from_u32(c) {
                    nfa.add_char(from, c, to);
                }
            }
        }
        Symbol::RuleRef(name) => {
            let alts = grammar
                .rules
                .get(name)
                .ok_or_else(|| GrammarError::UndefinedNonterminal(name.clone()))?;
            wire_alternatives(nfa, grammar, alts, from, to)?;
        }
        Symbol::Group(alts) => {
            wire_alternatives(nfa, grammar, alts, from, to)?;
        }
        Symbol::Repeat { inner, min, max } => {
            // Unrolled chain: mandatory copies up to `min`, optional up to `max`.
            let mut cursor = from;
            for i in 0..*max {
                let next = if i + 1 == *max { to } else { nfa.add_state() };
                wire_symbol(nfa, grammar, inner, cursor, next)?;
                if i >= *min {
                    // Enough copies consumed: the rest are optional.
                    nfa.add_eps(cursor, to);
                }
                cursor = next;
            }
            if *max == 0 {
                nfa.add_eps(from, to);
            }
        }
    }
    Ok(())
}

fn eps_closure(nfa: &Nfa, set: &BTreeSet<usize>) -> BTreeSet<usize> {
    let mut closure = set.clone();
    let mut stack: Vec<usize> = set.iter().copied().collect();
    while let Some(s) = stack.pop() {
        for &t in &nfa.epsilon[s] {
            if closure.insert(t) {
                stack.push(t);
            }
        }
    }
    closure
}

/// Subset construction with BFS discovery order, which gives canonical
/// state numbering (identical grammar text => identical automaton).
fn determinize(nfa: &Nfa) -> GrammarAutomaton {
    let mut start = BTreeSet::new();
    start.insert(0);
    let start = eps_closure(nfa, &start);

    let mut index: HashMap<BTreeSet<usize>, usize> = HashMap::new();
    let mut sets: Vec<BTreeSet<usize>> = vec![start.clone()];
    index.insert(start, 0);
    let mut states: Vec<DfaState> = Vec::new();
    let mut frontier = 0;

    while frontier < sets.len() {
        let current = sets[frontier].clone();
        let mut by_char: BTreeMap<char, BTreeSet<usize>> = BTreeMap::new();
        for &s in &current {
            for (&c, targets) in &nfa.transitions[s] {
                by_char.entry(c).or_default().extend(targets.iter());
            }
        }
        let mut transitions = BTreeMap::new();
        for (c, targets) in by_char {
            let closure = eps_closure(nfa, &targets);
            let id = *index.entry(closure.clone()).or_insert_with(|| {
                sets.push(closure);
                sets.len() - 1
            });
            transitions.insert(c, id);
        }
        let accepting = current.contains(&nfa.accept);
        states.push(DfaState {
            transitions,
            accepting,
            must_continue: !accepting,
        });
        frontier += 1;
    }

    GrammarAutomaton { states }
}

// ---------------------------------------------------------------------------
// Token masking
// ---------------------------------------------------------------------------

/// Tokens whose characters can all be consumed from `state` while staying in
/// live automaton states. The end-of-output pseudo-token is allowed exactly
/// when the state accepts.
pub fn allowed_tokens(
    automaton: &GrammarAutomaton,
    state: usize,
    tokenizer: &Tokenizer,
) -> TokenMask {
    let mut allowed = vec![false; tokenizer.vocab_size()];
    for id in 0..tokenizer.vocab_size() {
        if tokenizer.is_special(id) {
            continue;
        }
        let text = tokenizer.token_text(id);
        if text.is_empty() {
            continue;
        }
        if automaton.walk(state, text).is_some() {
            allowed[id] = true;
        }
    }
    TokenMask {
        allowed,
        end_allowed: automaton.states[state].accepting,
    }
}

/// The two grammars shipped with the workbench.
pub const APR_GRAMMAR: &str = "?start: apr\napr: (INTEGER~1..2) (\".\" INTEGER~2)\nINTEGER : (\"0\"..\"9\")\n";
pub const APPROVAL_GRAMMAR: &str = "?start: value\n\n?value: object\n| \"yes\"\n| \"no\"\n";

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_apr_grammar() {
        let g = parse_ebnf(APR_GRAMMAR).unwrap();
        assert_eq!(g.start, "start");
        assert!(g.rules.contains_key("apr"));
        assert!(g.rules.contains_key("INTEGER"));
        assert_eq!(g.rules["INTEGER"], vec![vec![Symbol::Group(vec![vec![
            Symbol::Range('0', '9')
        ]])]]);
        assert!(g.warnings.is_empty());
    }

    #[test]
    fn parses_approval_grammar_pruning_object() {
        let g = parse_ebnf(APPROVAL_GRAMMAR).unwrap();
        assert_eq!(g.start, "start");
        let value = &g.rules["value"];
        assert_eq!(
            value,
            &vec![
                vec![Symbol::Literal("yes".into())],
                vec![Symbol::Literal("no".into())]
            ]
        );
        assert_eq!(g.warnings.len(), 1, "object alternative should warn");
        assert!(g.warnings[0].contains("object"));
    }

    #[test]
    fn undefined_only_reference_is_an_error() {
        let err = parse_ebnf("?start: foo\nfoo: bar\n").unwrap_err();
        assert_eq!(err, GrammarError::UndefinedNonterminal("bar".into()));
    }

    #[test]
    fn syntax_error_carries_location() {
        let err = parse_ebnf("?start: \"unterminated\n").unwrap_err();
        assert!(matches!(err, GrammarError::Syntax { line: 1, .. }));
    }

    #[test]
    fn apr_automaton_accepts_and_rejects() {
        let a = compile(&parse_ebnf(APR_GRAMMAR).unwrap()).unwrap();
        for good in ["4.25", "99.99", "0.00", "12.50", "00.01"] {
            assert!(a.accepts(good), "{good} should be accepted");
        }
        for bad in ["125.00", "4.2", "4.253", "", ".", "4.", "4..25", "a.25"] {
            assert!(!a.accepts(bad), "{bad} should be rejected");
        }
    }

    #[test]
    fn approval_automaton_language_is_yes_no() {
        let a = compile(&parse_ebnf(APPROVAL_GRAMMAR).unwrap()).unwrap();
        assert!(a.accepts("yes"));
        assert!(a.accepts("no"));
        for bad in ["", "y", "ye", "yess", "nope", "maybe", "Yes"] {
            assert!(!a.accepts(bad), "{bad} should be rejected");
        }
    }

    #[test]
    fn recursion_is_rejected() {
        let err = compile(&parse_ebnf("?start: a\na: \"x\" | \"(\" a \")\"\n").unwrap())
            .unwrap_err();
        assert!(matches!(err, GrammarError::Unsupported(_)));
    }

    #[test]
    fn compile_is_canonical() {
        let a1 = compile(&parse_ebnf(APR_GRAMMAR).unwrap()).unwrap();
        let a2 = compile(&parse_ebnf(APR_GRAMMAR).unwrap()).unwrap();
        assert_eq!(a1, a2);
    }

    #[test]
    fn fuzz_against_regex_oracle() {
        // Reference oracle for the rate grammar: ^\d{1,2}\.\d{2}$
        let a = compile(&parse_ebnf(APR_GRAMMAR).unwrap()).unwrap();
        let re = regex::Regex::new(r"^\d{1,2}\.\d{2}$").unwrap();
        let alphabet: Vec<char> = "0123456789.x".chars().collect();
        let mut rng = crate::numerics::SeededRng::new(2024);
        for _ in 0..20_000 {
            let len = rng.below(8);
            let s: String = (0..len).map(|_| alphabet[rng.below(alphabet.len())]).collect();
            assert_eq!(a.accepts(&s), re.is_match(&s), "mismatch on {s:?}");
        }
    }

    #[test]
    fn mandatory_continuation_flags() {
        let a = compile(&parse_ebnf(APR_GRAMMAR).unwrap()).unwrap();
        // Start state: not accepting, must continue.
        assert!(a.states[GrammarAutomaton::START].must_continue);
        // After a full rate: accepting, no continuation possible.
        let end = a.walk(GrammarAutomaton::START, "4.25").unwrap();
        assert!(a.states[end].accepting);
        assert!(!a.states[end].must_continue);
        assert!(a.states[end].transitions.is_empty());
    }
}
