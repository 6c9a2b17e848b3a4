//! Random C loop generator with an execution oracle.
//!
//! `generate` builds a small loop-nest AST from a seed and renders it as a
//! complete C translation unit. `oracle_check` interprets the same AST
//! concretely over the full iteration space and reports whether the loop can
//! run its iterations in parallel given a set of privatized scalars and
//! reduction clauses. The oracle never looks at source text or at any static
//! analysis: it logs every memory access per iteration and compares iteration
//! pairs, so it serves as independent ground truth.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_EXTENT: i64 = 16;

// ---------------------------------------------------------------------------
// AST
// ---------------------------------------------------------------------------

/// Linear integer form over symbols: Σ coeff·sym + konst.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lin {
    pub terms: Vec<(i64, String)>,
    pub konst: i64,
}

impl Lin {
    pub fn konst(v: i64) -> Self {
        Lin {
            terms: vec![],
            konst: v,
        }
    }

    pub fn sym(name: &str) -> Self {
        Lin {
            terms: vec![(1, name.to_string())],
            konst: 0,
        }
    }

    pub fn affine(coeff: i64, name: &str, konst: i64) -> Self {
        Lin {
            terms: vec![(coeff, name.to_string())],
            konst,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(i64),
    Scalar(String),
    ArrRead(String, Vec<Lin>),
    Bin(char, Box<Expr>, Box<Expr>),
    MathCall(&'static str, Box<Expr>),
    UserCall(&'static str, Box<Expr>),
    Deref(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AOp {
    Set,
    Add,
    Mul,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stmt {
    /// `arr[idx...] op rhs;`
    Arr {
        arr: String,
        idx: Vec<Lin>,
        op: AOp,
        rhs: Expr,
    },
    /// `[double] name op rhs;` (`decl` renders a fresh block-scoped double)
    Sca {
        name: String,
        op: AOp,
        rhs: Expr,
        decl: bool,
    },
    If {
        lhs: Expr,
        cmp: &'static str,
        rhs: Expr,
        then: Vec<Stmt>,
    },
    Inner {
        var: String,
        decl_in_init: bool,
        hi: Lin,
        body: Vec<Stmt>,
    },
    Io,
    Break,
    Return,
    /// `i = i + k;` induction tampering
    WriteIndex(i64),
}

#[derive(Debug, Clone)]
pub struct LoopAst {
    pub var: String,
    pub lo: i64,
    /// Exclusive bound; rendered either as the literal or as `n`.
    pub hi: i64,
    pub hi_symbolic: bool,
    pub stride: i64,
    pub body: Vec<Stmt>,
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

fn render_lin(l: &Lin) -> String {
    let mut out = String::new();
    for (coeff, sym) in &l.terms {
        let lead = out.is_empty();
        match (*coeff, lead) {
            (1, true) => out.push_str(sym),
            (-1, true) => {
                out.push('-');
                out.push_str(sym);
            }
            (1, false) => {
                out.push_str(" + ");
                out.push_str(sym);
            }
            (-1, false) => {
                out.push_str(" - ");
                out.push_str(sym);
            }
            (c, true) => out.push_str(&format!("{c}*{sym}")),
            (c, false) if c > 0 => out.push_str(&format!(" + {c}*{sym}")),
            (c, false) => out.push_str(&format!(" - {}*{sym}", -c)),
        }
    }
    if out.is_empty() {
        return l.konst.to_string();
    }
    match l.konst {
        0 => {}
        k if k > 0 => out.push_str(&format!(" + {k}")),
        k => out.push_str(&format!(" - {}", -k)),
    }
    out
}

fn prec(op: char) -> u8 {
    match op {
        '*' | '/' => 2,
        _ => 1,
    }
}

fn render_expr(e: &Expr, min_prec: u8) -> String {
    match e {
        Expr::Num(v) => {
            if *v < 0 {
                format!("({v}.0)")
            } else {
                format!("{v}.0")
            }
        }
        Expr::Scalar(name) => name.clone(),
        Expr::ArrRead(arr, idx) => {
            let subs: String = idx.iter().map(|l| format!("[{}]", render_lin(l))).collect();
            format!("{arr}{subs}")
        }
        Expr::Bin(op, l, r) => {
            let p = prec(*op);
            let text = format!(
                "{} {op} {}",
                render_expr(l, p),
                render_expr(r, p + 1)
            );
            if p < min_prec {
                format!("({text})")
            } else {
                text
            }
        }
        Expr::MathCall(f, arg) => format!("{f}({})", render_expr(arg, 0)),
        Expr::UserCall(f, arg) => format!("{f}({})", render_expr(arg, 0)),
        Expr::Deref(p) => format!("(*{p})"),
    }
}

fn render_stmts(stmts: &[Stmt], indent: usize, out: &mut String) {
    let pad = "    ".repeat(indent);
    for stmt in stmts {
        match stmt {
            Stmt::Arr { arr, idx, op, rhs } => {
                let subs: String = idx.iter().map(|l| format!("[{}]", render_lin(l))).collect();
                let opstr = match op {
                    AOp::Set => "=",
                    AOp::Add => "+=",
                    AOp::Mul => "*=",
                };
                out.push_str(&format!(
                    "{pad}{arr}{subs} {opstr} {};\n",
                    render_expr(rhs, 0)
                ));
            }
            Stmt::Sca {
                name,
                op,
                rhs,
                decl,
            } => {
                let opstr = match op {
                    AOp::Set => "=",
                    AOp::Add => "+=",
                    AOp::Mul => "*=",
                };
                let prefix = if *decl { "double " } else { "" };
                out.push_str(&format!(
                    "{pad}{prefix}{name} {opstr} {};\n",
                    render_expr(rhs, 0)
                ));
            }
            Stmt::If {
                lhs,
                cmp,
                rhs,
                then,
            } => {
                out.push_str(&format!(
                    "{pad}if ({} {cmp} {}) {{\n",
                    render_expr(lhs, 0),
                    render_expr(rhs, 0)
                ));
                render_stmts(then, indent + 1, out);
                out.push_str(&format!("{pad}}}\n"));
            }
            Stmt::Inner {
                var,
                decl_in_init,
                hi,
                body,
            } => {
                let decl = if *decl_in_init { "int " } else { "" };
                out.push_str(&format!(
                    "{pad}for ({decl}{var} = 0; {var} < {}; {var}++) {{\n",
                    render_lin(hi)
                ));
                render_stmts(body, indent + 1, out);
                out.push_str(&format!("{pad}}}\n"));
            }
            Stmt::Io => out.push_str(&format!("{pad}printf(\"%d\\n\", 0);\n")),
            Stmt::Break => out.push_str(&format!("{pad}break;\n")),
            Stmt::Return => out.push_str(&format!("{pad}return;\n")),
            Stmt::WriteIndex(k) => out.push_str(&format!("{pad}i = i + {k};\n")),
        }
    }
}

pub fn render_unit(ast: &LoopAst, seed: u64) -> String {
    let mut body = String::new();
    render_stmts(&ast.body, 2, &mut body);
    let bound = if ast.hi_symbolic {
        "n".to_string()
    } else {
        ast.hi.to_string()
    };
    let step = if ast.stride == 1 {
        format!("{}++", ast.var)
    } else {
        format!("{} += {}", ast.var, ast.stride)
    };
    format!(
        "#include <math.h>\n#include <stdio.h>\n\ndouble helper(double x);\n\nvoid kernel_{seed}(double A[64][64], double B[64][64], double C[128], double D[128],\n            double *p, int n, int m) {{\n    int i, j, k;\n    double t, u, acc;\n    t = 0.0;\n    u = 0.0;\n    acc = 0.0;\n    for ({var} = {lo}; {var} < {bound}; {step}) {{\n{body}    }}\n}}\n",
        var = ast.var,
        lo = ast.lo,
    )
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

struct Gen {
    rng: ChaCha8Rng,
    /// body-declared doubles already introduced at the current top level
    body_decls: Vec<String>,
    /// temps already written by an earlier generated statement; reads prefer
    /// these so that read-before-write happens deliberately, not by accident
    written: Vec<String>,
    /// subscript vector of the first write to each array; later accesses
    /// reuse it most of the time so multi-statement loops stay consistent
    arr_shape: HashMap<String, Vec<Lin>>,
}

const ARRAYS_2D: &[&str] = &["A", "B"];
const ARRAYS_1D: &[&str] = &["C", "D"];

impl Gen {
    fn lin_for(&mut self, vars: &[&str], safe: bool) -> Lin {
        // Subscript over the available loop variables.
        let var = *vars.choose(&mut self.rng).unwrap();
        if safe {
            match self.rng.gen_range(0..4) {
                0 => Lin::sym(var),
                1 => Lin::affine(1, var, self.rng.gen_range(1..4)),
                2 => Lin::affine(2, var, self.rng.gen_range(0..4)),
                _ => Lin::affine(1, var, 0),
            }
        } else {
            match self.rng.gen_range(0..4) {
                0 => Lin::konst(self.rng.gen_range(0..8)),
                1 => Lin::affine(1, var, -1),
                2 => Lin {
                    // i + j style mixes
                    terms: vars.iter().map(|v| (1i64, v.to_string())).collect(),
                    konst: 0,
                },
                _ => Lin::sym("m"),
            }
        }
    }

    fn value_expr(&mut self, vars: &[&str], depth: usize) -> Expr {
        let choice = if depth >= 2 {
            self.rng.gen_range(0..3)
        } else {
            self.rng.gen_range(0..6)
        };
        match choice {
            0 => Expr::Num(self.rng.gen_range(-3..5)),
            1 => {
                let mut pool: Vec<String> = vec!["m".into()];
                pool.extend(self.written.iter().cloned());
                Expr::Scalar(pool.choose(&mut self.rng).unwrap().clone())
            }
            2 => self.array_read(vars),
            3 => Expr::Bin(
                *['+', '-', '*'].choose(&mut self.rng).unwrap(),
                Box::new(self.value_expr(vars, depth + 1)),
                Box::new(self.value_expr(vars, depth + 1)),
            ),
            4 => Expr::MathCall(
                *["sqrt", "fabs", "sin", "cos"].choose(&mut self.rng).unwrap(),
                Box::new(self.value_expr(vars, depth + 1)),
            ),
            _ => self.array_read(vars),
        }
    }

    fn array_read(&mut self, vars: &[&str]) -> Expr {
        if self.rng.gen_bool(0.5) {
            let arr = *ARRAYS_2D.choose(&mut self.rng).unwrap();
            if let Some(shape) = self.arr_shape.get(arr) {
                if self.rng.gen_bool(0.7) {
                    return Expr::ArrRead(arr.to_string(), shape.clone());
                }
            }
            let a = self.lin_for(vars, true);
            let b_safe = self.rng.gen_bool(0.8);
            let b = self.lin_for(vars, b_safe);
            Expr::ArrRead(arr.to_string(), vec![a, b])
        } else {
            let arr = *ARRAYS_1D.choose(&mut self.rng).unwrap();
            if let Some(shape) = self.arr_shape.get(arr) {
                if self.rng.gen_bool(0.7) {
                    return Expr::ArrRead(arr.to_string(), shape.clone());
                }
            }
            let safe = self.rng.gen_bool(0.8);
            Expr::ArrRead(arr.to_string(), vec![self.lin_for(vars, safe)])
        }
    }

    fn stmt(&mut self, vars: &[&str], depth: usize, top_level: bool) -> Stmt {
        let roll = self.rng.gen_range(0..100);
        match roll {
            // Array write, mostly with an analyzer-friendly subscript.
            0..=36 => {
                let safe = self.rng.gen_bool(0.8);
                let op = if self.rng.gen_bool(0.85) {
                    AOp::Set
                } else {
                    AOp::Add
                };
                let rhs = self.value_expr(vars, 1);
                let (arr, idx) = if self.rng.gen_bool(0.5) {
                    let arr = *ARRAYS_2D.choose(&mut self.rng).unwrap();
                    let idx = match self.arr_shape.get(arr) {
                        Some(shape) if self.rng.gen_bool(0.7) => shape.clone(),
                        _ => vec![self.lin_for(&["i"], safe), self.lin_for(vars, true)],
                    };
                    (arr, idx)
                } else {
                    let arr = *ARRAYS_1D.choose(&mut self.rng).unwrap();
                    let idx = match self.arr_shape.get(arr) {
                        Some(shape) if self.rng.gen_bool(0.7) => shape.clone(),
                        _ => vec![self.lin_for(vars, safe)],
                    };
                    (arr, idx)
                };
                // Only shapes over the outer variable and invariants are
                // reusable anywhere in the body; inner-variable shapes would
                // leak block-scoped names out of their loops.
                let reusable = idx
                    .iter()
                    .all(|l| l.terms.iter().all(|(_, s)| s == "i" || s == "m"));
                if reusable {
                    self.arr_shape
                        .entry(arr.to_string())
                        .or_insert_with(|| idx.clone());
                }
                Stmt::Arr {
                    arr: arr.to_string(),
                    idx,
                    op,
                    rhs,
                }
            }
            // Scalar temp write (t/u, or a fresh body-declared v/w).
            37..=49 => {
                let rhs = self.value_expr(vars, 1);
                if top_level && self.body_decls.len() < 2 && self.rng.gen_bool(0.4) {
                    let name = if self.body_decls.is_empty() { "v" } else { "w" };
                    self.body_decls.push(name.to_string());
                    self.written.push(name.to_string());
                    Stmt::Sca {
                        name: name.to_string(),
                        op: AOp::Set,
                        rhs,
                        decl: true,
                    }
                } else {
                    let mut pool: Vec<String> = vec!["t".into(), "u".into()];
                    pool.extend(self.body_decls.iter().cloned());
                    let name = pool.choose(&mut self.rng).unwrap().clone();
                    if top_level && !self.written.contains(&name) {
                        self.written.push(name.clone());
                    }
                    Stmt::Sca {
                        name,
                        op: AOp::Set,
                        rhs,
                        decl: false,
                    }
                }
            }
            // Reduction-shaped statement on acc (sometimes deliberately
            // broken so the analyzer must reject it).
            50..=64 => {
                let op = if self.rng.gen_bool(0.7) { '+' } else { '*' };
                let rest = self.value_expr(vars, 1);
                match self.rng.gen_range(0..10) {
                    0..=4 => Stmt::Sca {
                        name: "acc".into(),
                        op: if op == '+' { AOp::Add } else { AOp::Mul },
                        rhs: rest,
                        decl: false,
                    },
                    5..=7 => Stmt::Sca {
                        name: "acc".into(),
                        op: AOp::Set,
                        rhs: Expr::Bin(op, Box::new(Expr::Scalar("acc".into())), Box::new(rest)),
                        decl: false,
                    },
                    _ => Stmt::Sca {
                        // acc = acc * rest + 1: not a reduction
                        name: "acc".into(),
                        op: AOp::Set,
                        rhs: Expr::Bin(
                            '+',
                            Box::new(Expr::Bin(
                                '*',
                                Box::new(Expr::Scalar("acc".into())),
                                Box::new(rest),
                            )),
                            Box::new(Expr::Num(1)),
                        ),
                        decl: false,
                    },
                }
            }
            // Conditional wrapper. The guarded statement is usually one that
            // stays safe under a condition (disjoint array write, reduction
            // update, block-local temp); a conditional write to a shared
            // temp is generated, more rarely, as a hazard.
            65..=74 => {
                let lhs = self.array_read(vars);
                let cmp = *["<", ">", "<=", ">="].choose(&mut self.rng).unwrap();
                let rhs = Expr::Num(self.rng.gen_range(-2..3));
                let guarded = match self.rng.gen_range(0..10) {
                    0..=4 => {
                        let value = self.value_expr(vars, 1);
                        if self.rng.gen_bool(0.5) {
                            let arr = *ARRAYS_2D.choose(&mut self.rng).unwrap();
                            Stmt::Arr {
                                arr: arr.to_string(),
                                idx: vec![Lin::sym("i"), self.lin_for(vars, true)],
                                op: AOp::Set,
                                rhs: value,
                            }
                        } else {
                            let arr = *ARRAYS_1D.choose(&mut self.rng).unwrap();
                            Stmt::Arr {
                                arr: arr.to_string(),
                                idx: vec![self.lin_for(&["i"], true)],
                                op: AOp::Set,
                                rhs: value,
                            }
                        }
                    }
                    5..=7 => Stmt::Sca {
                        name: "acc".into(),
                        op: if self.rng.gen_bool(0.7) { AOp::Add } else { AOp::Mul },
                        rhs: self.value_expr(vars, 1),
                        decl: false,
                    },
                    8 if !self.body_decls.is_empty() => {
                        let name = self.body_decls.choose(&mut self.rng).unwrap().clone();
                        Stmt::Sca {
                            name,
                            op: AOp::Set,
                            rhs: self.value_expr(vars, 1),
                            decl: false,
                        }
                    }
                    _ => Stmt::Sca {
                        name: if self.rng.gen_bool(0.5) { "t" } else { "u" }.to_string(),
                        op: AOp::Set,
                        rhs: self.value_expr(vars, 1),
                        decl: false,
                    },
                };
                Stmt::If {
                    lhs,
                    cmp,
                    rhs,
                    then: vec![guarded],
                }
            }
            // Inner loop (over a variable not already driving an enclosing
            // loop: reusing one would reset the outer counter forever).
            75..=93 if depth < 2 => {
                let candidates: Vec<(&str, bool)> = [("j", false), ("k", false), ("jj", true)]
                    .into_iter()
                    .filter(|(v, _)| !vars.contains(v))
                    .collect();
                let (var, decl_in_init) = *candidates.choose(&mut self.rng).unwrap();
                let hi = if self.rng.gen_bool(0.7) {
                    Lin::konst(self.rng.gen_range(4..=16))
                } else {
                    Lin::sym("n")
                };
                let mut inner_vars = vars.to_vec();
                inner_vars.push(var);
                let count = self.rng.gen_range(1..=2);
                let body = (0..count)
                    .map(|_| self.stmt(&inner_vars, depth + 1, false))
                    .collect();
                Stmt::Inner {
                    var: var.to_string(),
                    decl_in_init,
                    hi,
                    body,
                }
            }
            75..=93 => Stmt::Sca {
                name: "t".into(),
                op: AOp::Set,
                rhs: self.value_expr(vars, 1),
                decl: false,
            },
            // Hazards.
            _ => match self.rng.gen_range(0..6) {
                0 => Stmt::Io,
                1 => Stmt::Arr {
                    arr: "C".into(),
                    idx: vec![Lin::sym("i")],
                    op: AOp::Set,
                    rhs: Expr::UserCall("helper", Box::new(self.array_read(vars))),
                },
                2 => Stmt::Arr {
                    arr: "D".into(),
                    idx: vec![Lin::sym("i")],
                    op: AOp::Set,
                    rhs: Expr::Deref("p"),
                },
                3 => {
                    if depth == 0 {
                        Stmt::Break
                    } else {
                        Stmt::Return
                    }
                }
                4 => Stmt::WriteIndex(2),
                _ => Stmt::Arr {
                    // classic recurrence a[i] = a[i-1] + ...
                    arr: "C".into(),
                    idx: vec![Lin::sym("i")],
                    op: AOp::Set,
                    rhs: Expr::Bin(
                        '+',
                        Box::new(Expr::ArrRead("C".into(), vec![Lin::affine(1, "i", -1)])),
                        Box::new(Expr::Num(1)),
                    ),
                },
            },
        }
    }
}

pub fn generate_ast(seed: u64) -> LoopAst {
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(seed),
        body_decls: Vec::new(),
        written: Vec::new(),
        arr_shape: HashMap::new(),
    };
    let count = g.rng.gen_range(2..=5);
    let hi_symbolic = g.rng.gen_bool(0.2);
    let stride = if g.rng.gen_bool(0.15) { 2 } else { 1 };
    let body = (0..count).map(|_| g.stmt(&["i"], 0, true)).collect();
    LoopAst {
        var: "i".into(),
        lo: 0,
        hi: DEFAULT_EXTENT,
        hi_symbolic,
        stride,
        body,
    }
}

pub fn generate(seed: u64) -> (LoopAst, String) {
    let ast = generate_ast(seed);
    let source = render_unit(&ast, seed);
    (ast, source)
}

// ---------------------------------------------------------------------------
// Oracle
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Loc {
    Scalar(String),
    Array(String, Vec<i64>),
    World(&'static str),
}

impl std::fmt::Display for Loc {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Loc::Scalar(s) => write!(f, "{s}"),
            Loc::Array(a, idx) => {
                write!(f, "{a}")?;
                for v in idx {
                    write!(f, "[{v}]")?;
                }
                Ok(())
            }
            Loc::World(w) => write!(f, "<{w}>"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Read,
    Write,
    Update(char),
}

#[derive(Default)]
struct IterLog {
    /// ordered accesses, one entry per (location, kind) event
    events: Vec<(Loc, Kind)>,
}

struct Interp<'a> {
    ast: &'a LoopAst,
    scalars: HashMap<String, i64>,
    arrays: HashMap<(String, Vec<i64>), i64>,
    /// per-outer-iteration block locals (fresh storage each iteration)
    locals: HashMap<String, i64>,
    local_names: BTreeSet<String>,
    log: IterLog,
    stopped: bool,
    /// remaining statement budget; a degenerate loop burns it and conflicts
    budget: u64,
}

fn seeded_cell(arr: &str, idx: &[i64]) -> i64 {
    let mut h: i64 = 1469598103934665603u64 as i64;
    for b in arr.bytes() {
        h = h.wrapping_mul(31).wrapping_add(b as i64);
    }
    for v in idx {
        h = h.wrapping_mul(1099511628211).wrapping_add(*v);
    }
    (h % 7).abs() - 3
}

impl<'a> Interp<'a> {
    fn lin(&mut self, l: &Lin) -> i64 {
        let mut v = l.konst;
        for (coeff, sym) in &l.terms {
            v += coeff * self.read_scalar(sym);
        }
        v
    }

    fn read_scalar(&mut self, name: &str) -> i64 {
        if name == self.ast.var {
            return self.scalars[name];
        }
        if self.local_names.contains(name) {
            return *self.locals.get(name).unwrap_or(&0);
        }
        self.log
            .events
            .push((Loc::Scalar(name.to_string()), Kind::Read));
        *self.scalars.get(name).unwrap_or(&0)
    }

    fn write_scalar(&mut self, name: &str, value: i64, kind: Kind) {
        if name == self.ast.var {
            self.log.events.push((Loc::World("induction"), Kind::Write));
            self.scalars.insert(name.to_string(), value);
            return;
        }
        if self.local_names.contains(name) {
            self.locals.insert(name.to_string(), value);
            return;
        }
        self.log.events.push((Loc::Scalar(name.to_string()), kind));
        self.scalars.insert(name.to_string(), value);
    }

    fn eval(&mut self, e: &Expr) -> i64 {
        match e {
            Expr::Num(v) => *v,
            Expr::Scalar(name) => self.read_scalar(name),
            Expr::ArrRead(arr, idx) => {
                let concrete: Vec<i64> = idx.iter().map(|l| self.lin(l)).collect();
                self.log
                    .events
                    .push((Loc::Array(arr.clone(), concrete.clone()), Kind::Read));
                *self
                    .arrays
                    .get(&(arr.clone(), concrete.clone()))
                    .unwrap_or(&seeded_cell(arr, &concrete))
            }
            Expr::Bin(op, l, r) => {
                let a = self.eval(l);
                let b = self.eval(r);
                arith(*op, a, b)
            }
            Expr::MathCall(f, arg) => {
                let v = self.eval(arg);
                match *f {
                    "fabs" => v.abs(),
                    "sqrt" => (v.max(0) as f64).sqrt() as i64,
                    _ => v,
                }
            }
            Expr::UserCall(_, arg) => {
                let v = self.eval(arg);
                self.log.events.push((Loc::World("call"), Kind::Write));
                v
            }
            Expr::Deref(_) => {
                self.log.events.push((Loc::World("deref"), Kind::Read));
                1
            }
        }
    }

    /// Leftmost-spine update detection: `name = name ⊕ e1 ⊕ e2 ...` where the
    /// whole chain folds into one commutative update.
    fn as_update(name: &str, rhs: &Expr) -> Option<char> {
        let mut spine_ops: Vec<char> = Vec::new();
        let mut rests: Vec<&Expr> = Vec::new();
        let mut cur = rhs;
        loop {
            match cur {
                Expr::Bin(op, l, r) => {
                    spine_ops.push(*op);
                    rests.push(r);
                    cur = l;
                }
                Expr::Scalar(s) if s == name => break,
                _ => return None,
            }
        }
        let first = *spine_ops.last()?;
        let compatible = |op: char| match first {
            '+' => op == '+' || op == '-',
            '*' => op == '*' || op == '/',
            _ => false,
        };
        if !matches!(first, '+' | '*') || !spine_ops.iter().all(|&op| compatible(op)) {
            return None;
        }
        if rests.iter().any(|e| mentions(e, name)) {
            return None;
        }
        Some(first)
    }

    fn run_stmts(&mut self, stmts: &[Stmt], loop_depth: usize) {
        for stmt in stmts {
            if self.stopped {
                return;
            }
            if self.budget == 0 {
                self.log
                    .events
                    .push((Loc::World("nonterminating"), Kind::Write));
                self.stopped = true;
                return;
            }
            self.budget -= 1;
            match stmt {
                Stmt::Arr { arr, idx, op, rhs } => {
                    let concrete: Vec<i64> = idx.iter().map(|l| self.lin(l)).collect();
                    let value = self.eval(rhs);
                    let key = (arr.clone(), concrete.clone());
                    let old = *self.arrays.get(&key).unwrap_or(&seeded_cell(arr, &concrete));
                    let (kind, newv) = match op {
                        AOp::Set => (Kind::Write, value),
                        AOp::Add => (Kind::Update('+'), old.wrapping_add(value)),
                        AOp::Mul => (Kind::Update('*'), old.wrapping_mul(value)),
                    };
                    self.log
                        .events
                        .push((Loc::Array(arr.clone(), concrete), kind));
                    self.arrays.insert(key, newv);
                }
                Stmt::Sca { name, op, rhs, decl } => {
                    if *decl {
                        self.local_names.insert(name.clone());
                    }
                    match op {
                        AOp::Set => {
                            if let Some(redop) = Self::as_update(name, rhs) {
                                // The leftmost `name` leaf folds into the
                                // atomic update: no Read event for it.
                                let newv = self.eval_spine(name, rhs);
                                self.write_scalar(name, newv, Kind::Update(redop));
                            } else {
                                let value = self.eval(rhs);
                                self.write_scalar(name, value, Kind::Write);
                            }
                        }
                        AOp::Add | AOp::Mul => {
                            let value = self.eval(rhs);
                            let old = if self.local_names.contains(name) {
                                *self.locals.get(name).unwrap_or(&0)
                            } else {
                                *self.scalars.get(name).unwrap_or(&0)
                            };
                            let (redop, newv) = if *op == AOp::Add {
                                ('+', old.wrapping_add(value))
                            } else {
                                ('*', old.wrapping_mul(value))
                            };
                            if mentions(rhs, name) {
                                // `s += f(s)` reads s non-atomically
                                self.write_scalar(name, newv, Kind::Write);
                            } else {
                                self.write_scalar(name, newv, Kind::Update(redop));
                            }
                        }
                    }
                }
                Stmt::If {
                    lhs,
                    cmp,
                    rhs,
                    then,
                } => {
                    let a = self.eval(lhs);
                    let b = self.eval(rhs);
                    let taken = match *cmp {
                        "<" => a < b,
                        ">" => a > b,
                        "<=" => a <= b,
                        ">=" => a >= b,
                        "==" => a == b,
                        _ => a != b,
                    };
                    if taken {
                        self.run_stmts(then, loop_depth);
                    }
                }
                Stmt::Inner {
                    var,
                    decl_in_init,
                    hi,
                    body,
                } => {
                    if *decl_in_init {
                        self.local_names.insert(var.clone());
                    }
                    let bound = self.lin(hi);
                    self.write_scalar(var, 0, Kind::Write);
                    loop {
                        let v = self.read_scalar(var);
                        if v >= bound {
                            break;
                        }
                        self.run_stmts(body, loop_depth + 1);
                        if self.stopped {
                            return;
                        }
                        let v = self.read_scalar(var);
                        self.write_scalar(var, v + 1, Kind::Write);
                    }
                }
                Stmt::Io => {
                    self.log.events.push((Loc::World("io"), Kind::Write));
                }
                Stmt::Break => {
                    if loop_depth == 0 {
                        self.log.events.push((Loc::World("control"), Kind::Write));
                        self.stopped = true;
                        return;
                    }
                    // inner break: handled by the caller loop below
                    self.stopped = true;
                    return;
                }
                Stmt::Return => {
                    self.log.events.push((Loc::World("control"), Kind::Write));
                    self.stopped = true;
                    return;
                }
                Stmt::WriteIndex(k) => {
                    let v = self.scalars[&self.ast.var];
                    self.write_scalar(&self.ast.var.clone(), v + k, Kind::Write);
                }
            }
        }
    }

    /// Evaluate a confirmed update spine. The leftmost `name` leaf reads the
    /// current value without logging; everything else evaluates normally.
    fn eval_spine(&mut self, name: &str, e: &Expr) -> i64 {
        match e {
            Expr::Scalar(s) if s == name => {
                if self.local_names.contains(name) {
                    *self.locals.get(name).unwrap_or(&0)
                } else {
                    *self.scalars.get(name).unwrap_or(&0)
                }
            }
            Expr::Bin(op, l, r) => {
                let lv = self.eval_spine(name, l);
                let rv = self.eval(r);
                arith(*op, lv, rv)
            }
            _ => self.eval(e),
        }
    }
}

fn arith(op: char, a: i64, b: i64) -> i64 {
    match op {
        '+' => a.wrapping_add(b),
        '-' => a.wrapping_sub(b),
        '*' => a.wrapping_mul(b),
        '/' => {
            if b == 0 {
                0
            } else {
                a / b
            }
        }
        _ => a,
    }
}

fn mentions(e: &Expr, name: &str) -> bool {
    match e {
        Expr::Num(_) | Expr::Deref(_) => false,
        Expr::Scalar(s) => s == name,
        Expr::ArrRead(_, idx) => idx.iter().any(|l| l.terms.iter().any(|(_, s)| s == name)),
        Expr::Bin(_, l, r) => mentions(l, name) || mentions(r, name),
        Expr::MathCall(_, a) | Expr::UserCall(_, a) => mentions(a, name),
    }
}

#[derive(Debug)]
pub struct OracleJudgment {
    pub conflict_free: bool,
    pub conflicts: Vec<String>,
    /// locations touched by at least one iteration
    pub touched: usize,
}

/// Interpret the loop over its concrete iteration space and decide whether
/// running iterations in parallel with the given `private` and `reductions`
/// clauses preserves the serial outcome.
pub fn oracle_check(
    ast: &LoopAst,
    private: &[String],
    reductions: &[(char, String)],
) -> OracleJudgment {
    let private: BTreeSet<&str> = private.iter().map(String::as_str).collect();
    let red_ops: BTreeMap<&str, char> = reductions.iter().map(|(op, s)| (s.as_str(), *op)).collect();

    // Run every iteration against the same starting state, sequentially
    // threading state (serial semantics), logging per-iteration accesses.
    let mut scalars: HashMap<String, i64> = HashMap::new();
    scalars.insert("t".into(), 0);
    scalars.insert("u".into(), 0);
    scalars.insert("acc".into(), 0);
    scalars.insert("m".into(), 7);
    scalars.insert("n".into(), DEFAULT_EXTENT);
    scalars.insert("j".into(), 0);
    scalars.insert("k".into(), 0);
    let mut arrays: HashMap<(String, Vec<i64>), i64> = HashMap::new();

    let mut logs: Vec<IterLog> = Vec::new();
    let mut iv = ast.lo;
    let mut guard = 0;
    while iv < ast.hi && guard < 1000 {
        guard += 1;
        scalars.insert(ast.var.clone(), iv);
        let mut interp = Interp {
            ast,
            scalars: scalars.clone(),
            arrays: arrays.clone(),
            locals: HashMap::new(),
            local_names: BTreeSet::new(),
            log: IterLog::default(),
            stopped: false,
            budget: 100_000,
        };
        interp.run_stmts(&ast.body, 0);
        // thread state forward (serial execution)
        scalars = interp.scalars;
        arrays = interp.arrays;
        scalars.insert(ast.var.clone(), iv);
        logs.push(interp.log);
        iv += ast.stride;
    }

    // Per-iteration, per-location summaries.
    #[derive(Default, Clone)]
    struct Summary {
        reads: bool,
        writes: bool,
        update_ops: BTreeSet<char>,
        first: Option<Kind>,
    }
    let mut per_loc: BTreeMap<Loc, BTreeMap<usize, Summary>> = BTreeMap::new();
    for (iter, log) in logs.iter().enumerate() {
        for (loc, kind) in &log.events {
            let entry = per_loc
                .entry(loc.clone())
                .or_default()
                .entry(iter)
                .or_default();
            if entry.first.is_none() {
                entry.first = Some(*kind);
            }
            match kind {
                Kind::Read => entry.reads = true,
                Kind::Write => entry.writes = true,
                Kind::Update(op) => {
                    entry.update_ops.insert(*op);
                }
            }
        }
    }

    let mut conflicts = Vec::new();
    for (loc, iters) in &per_loc {
        let scalar_name = match loc {
            Loc::Scalar(s) => Some(s.as_str()),
            _ => None,
        };
        if let Some(name) = scalar_name {
            if private.contains(name) {
                // Each touching iteration must write its private copy first.
                for (iter, summary) in iters {
                    if summary.first != Some(Kind::Write) {
                        conflicts.push(format!(
                            "private {loc}: iteration {iter} {} before writing",
                            match summary.first {
                                Some(Kind::Read) => "reads",
                                Some(Kind::Update(_)) => "updates",
                                _ => "accesses",
                            }
                        ));
                    }
                }
                continue;
            }
            if let Some(op) = red_ops.get(name) {
                // Every access in every iteration must be an update with the
                // declared operator.
                for (iter, summary) in iters {
                    let clean = !summary.reads
                        && !summary.writes
                        && summary.update_ops.iter().all(|o| o == op);
                    if !clean {
                        conflicts.push(format!(
                            "reduction {loc}: iteration {iter} has a non-update access"
                        ));
                    }
                }
                continue;
            }
        }
        // Ordinary shared location: brute-force iteration pairs.
        let touching: Vec<(&usize, &Summary)> = iters.iter().collect();
        for a in 0..touching.len() {
            for b in (a + 1)..touching.len() {
                let (ia, sa) = touching[a];
                let (ib, sb) = touching[b];
                if pair_conflicts(sa, sb) {
                    conflicts.push(format!("{loc}: iterations {ia} and {ib} conflict"));
                }
            }
        }
    }

    // Updates only commute under a declared reduction clause (handled
    // above); on an ordinary shared location they race like writes.
    fn pair_conflicts(a: &Summary, b: &Summary) -> bool {
        let a_writes = a.writes || !a.update_ops.is_empty();
        let b_writes = b.writes || !b.update_ops.is_empty();
        a_writes || b_writes
    }

    conflicts.sort();
    conflicts.dedup();
    OracleJudgment {
        conflict_free: conflicts.is_empty(),
        touched: per_loc.len(),
        conflicts,
    }
}
