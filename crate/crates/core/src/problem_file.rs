//! Reader and writer for problem definition files.
//!
//! ```text
//! # Example with a time-dependent drift and a modulated input.
//! [dims]
//! n = 1
//! m = 1
//!
//! [horizon]
//! T = 1
//!
//! [coef.A]
//! 0 : -1
//! 1 : -2
//!
//! [coef.B]
//! value = 1
//!
//! [terminal]
//! G = 1
//! g = 0
//!
//! [input.b]
//! gamma = 1.4142135623730951
//! profile = named:exp-over-sqrt-gap
//! profile_scale = 1
//! profile_rate = -1
//!
//! [initial]
//! t = 0
//! x = 1
//! ```
//!
//! Matrices are semicolon-separated rows of comma-separated reals. Vectors
//! may be written as a row (`1, 2`) or a column (`1; 2`). Coefficients and
//! deterministic input parts are either `value = <matrix>` or a table of
//! `t : <matrix>` lines, interpolated linearly. Omitted coefficients and
//! inputs are zero. A modulated input has `gamma` and a `profile`, which is
//! `named:exp` (`scale · e^{rate·s}`), `named:exp-over-sqrt-gap`
//! (`scale · e^{rate·s}/√(end − s)`, `end` defaulting to `T`) or `table`
//! followed by `profile(t) = <real>` lines.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::grid::GridFn;
use crate::linalg::{parse_matrix, Matrix, SymMatrix, Vector};
use crate::problem::{
    CoefFn, InitialPair, Inputs, Modulation, RandomInput, ScalarProfile, SlqProblem,
};

/// A parsed file: the problem and the optional `[initial]` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemFile {
    pub problem: SlqProblem,
    pub initial: Option<InitialPair>,
}

#[derive(Default)]
struct Section {
    line: usize,
    keys: Vec<(usize, String, String)>,
    table: Vec<(usize, f64, String)>,
}

impl Section {
    fn get(&self, key: &str) -> Option<(usize, &str)> {
        self.keys
            .iter()
            .find(|(_, k, _)| k == key)
            .map(|(l, _, v)| (*l, v.as_str()))
    }

    fn require(&self, key: &str, name: &str) -> Result<(usize, &str)> {
        self.get(key).ok_or_else(|| Error::Parse {
            line: self.line,
            message: format!("[{name}] needs '{key}'"),
        })
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn real(line: usize, text: &str) -> Result<f64> {
    let x: f64 = text
        .trim()
        .parse()
        .map_err(|_| parse_err(line, format!("bad number '{}'", text.trim())))?;
    if !x.is_finite() {
        return Err(parse_err(line, format!("non-finite number '{}'", text.trim())));
    }
    Ok(x)
}

fn count(line: usize, text: &str) -> Result<usize> {
    text.trim()
        .parse()
        .map_err(|_| parse_err(line, format!("bad count '{}'", text.trim())))
}

fn matrix(line: usize, text: &str) -> Result<Matrix> {
    parse_matrix(text).map_err(|e| parse_err(line, e.to_string()))
}

/// A row or column of reals, returned as a column.
fn vector(line: usize, text: &str) -> Result<Matrix> {
    let m = matrix(line, text)?;
    if m.ncols() == 1 {
        Ok(m)
    } else if m.nrows() == 1 {
        Ok(m.transpose())
    } else {
        Err(parse_err(line, format!("expected a vector, got a {}x{} matrix", m.nrows(), m.ncols())))
    }
}

fn split_sections(text: &str) -> Result<Vec<(String, Section)>> {
    let mut sections: Vec<(String, Section)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap().trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| parse_err(line, "unterminated section header"))?
                .trim()
                .to_string();
            if sections.iter().any(|(n, _)| *n == name) {
                return Err(parse_err(line, format!("duplicate section [{name}]")));
            }
            sections.push((name, Section { line, ..Section::default() }));
            continue;
        }
        let (_, section) = sections
            .last_mut()
            .ok_or_else(|| parse_err(line, "entry before the first section header"))?;
        if let Some((key, value)) = content.split_once('=') {
            let key = key.trim().to_string();
            if section.keys.iter().any(|(_, k, _)| *k == key) {
                return Err(parse_err(line, format!("duplicate key '{key}'")));
            }
            section.keys.push((line, key, value.trim().to_string()));
        } else if let Some((t, value)) = content.split_once(':') {
            section.table.push((line, real(line, t)?, value.trim().to_string()));
        } else {
            return Err(parse_err(line, format!("expected 'key = value' or 't : matrix', got '{content}'")));
        }
    }
    Ok(sections)
}

/// `value = …` or a table; `None` when the section has neither.
fn coef_fn(section: &Section, name: &str, as_vector: bool) -> Result<Option<CoefFn>> {
    let read = |line: usize, text: &str| {
        if as_vector {
            vector(line, text)
        } else {
            matrix(line, text)
        }
    };
    match (section.get("value"), section.table.is_empty()) {
        (Some(_), false) => Err(parse_err(
            section.line,
            format!("[{name}] has both 'value' and table lines"),
        )),
        (Some((line, v)), true) => Ok(Some(CoefFn::Constant(read(line, v)?))),
        (None, false) => {
            let mut grid = Vec::with_capacity(section.table.len());
            let mut values = Vec::with_capacity(section.table.len());
            for (line, t, v) in &section.table {
                if let Some(&prev) = grid.last() {
                    if *t <= prev {
                        return Err(parse_err(*line, "table times must increase"));
                    }
                }
                grid.push(*t);
                values.push(read(*line, v)?);
            }
            let f = GridFn::new(grid, values).map_err(|e| parse_err(section.line, e.to_string()))?;
            Ok(Some(CoefFn::Table(f)))
        }
        (None, true) => Ok(None),
    }
}

fn profile(section: &Section, name: &str, horizon: f64) -> Result<ScalarProfile> {
    let (line, kind) = section.require("profile", name)?;
    let param = |key: &str| -> Result<f64> {
        let (l, v) = section.require(key, name)?;
        real(l, v)
    };
    match kind {
        "named:exp" => Ok(ScalarProfile::Exp {
            scale: param("profile_scale")?,
            rate: param("profile_rate")?,
        }),
        "named:exp-over-sqrt-gap" => Ok(ScalarProfile::ExpOverSqrtGap {
            scale: param("profile_scale")?,
            rate: param("profile_rate")?,
            end: match section.get("profile_end") {
                Some((l, v)) => real(l, v)?,
                None => horizon,
            },
        }),
        "table" => {
            let mut points: Vec<(usize, f64, f64)> = Vec::new();
            for (l, k, v) in &section.keys {
                if let Some(t) = k.strip_prefix("profile(").and_then(|r| r.strip_suffix(')')) {
                    points.push((*l, real(*l, t)?, real(*l, v)?));
                }
            }
            if points.len() < 2 {
                return Err(parse_err(line, "a profile table needs at least two 'profile(t) = v' lines"));
            }
            if points.windows(2).any(|w| w[1].1 <= w[0].1) {
                return Err(parse_err(line, "profile table times must increase"));
            }
            let grid: Vec<f64> = points.iter().map(|p| p.1).collect();
            let values: Vec<f64> = points.iter().map(|p| p.2).collect();
            Ok(ScalarProfile::Table(
                GridFn::scalar(grid, &values).map_err(|e| parse_err(line, e.to_string()))?,
            ))
        }
        other => Err(parse_err(line, format!("unknown profile '{other}'"))),
    }
}

const KNOWN_SECTIONS: [&str; 15] = [
    "dims", "horizon", "coef.A", "coef.B", "coef.C", "coef.D", "coef.Q", "coef.S", "coef.R",
    "terminal", "input.b", "input.sigma", "input.q", "input.rho", "initial",
];

/// Parses a problem file and validates the problem.
pub fn parse_problem(text: &str) -> Result<ProblemFile> {
    let sections = split_sections(text)?;
    for (name, s) in &sections {
        if !KNOWN_SECTIONS.contains(&name.as_str()) {
            return Err(parse_err(s.line, format!("unknown section [{name}]")));
        }
    }
    let find = |name: &str| sections.iter().find(|(n, _)| n == name).map(|(_, s)| s);
    let dims = find("dims").ok_or_else(|| parse_err(1, "missing [dims]"))?;
    let (l, v) = dims.require("n", "dims")?;
    let n = count(l, v)?;
    let (l, v) = dims.require("m", "dims")?;
    let m = count(l, v)?;
    if n == 0 || m == 0 {
        return Err(parse_err(dims.line, "dimensions must be positive"));
    }
    let horizon_section = find("horizon").ok_or_else(|| parse_err(1, "missing [horizon]"))?;
    let (l, v) = horizon_section.require("T", "horizon")?;
    let horizon = real(l, v)?;

    let coef = |name: &str, rows: usize, cols: usize| -> Result<CoefFn> {
        match find(name) {
            Some(s) => Ok(coef_fn(s, name, false)?.unwrap_or_else(|| CoefFn::zeros(rows, cols))),
            None => Ok(CoefFn::zeros(rows, cols)),
        }
    };

    let (g, g_lin) = match find("terminal") {
        Some(s) => {
            let g = match s.get("G") {
                Some((l, v)) => {
                    SymMatrix::new(matrix(l, v)?, 1e-12).map_err(|e| parse_err(l, format!("G: {e}")))?
                }
                None => SymMatrix::zeros(n),
            };
            let g_lin = match s.get("g") {
                Some((l, v)) => Vector::from_column_slice(vector(l, v)?.as_slice()),
                None => Vector::zeros(n),
            };
            (g, g_lin)
        }
        None => (SymMatrix::zeros(n), Vector::zeros(n)),
    };

    let input = |key: &str, len: usize| -> Result<RandomInput> {
        let name = format!("input.{key}");
        let Some(s) = find(&name) else {
            return Ok(RandomInput::zero(len));
        };
        let deterministic = coef_fn(s, &name, true)?.unwrap_or_else(|| CoefFn::zeros(len, 1));
        let modulated = match s.get("gamma") {
            Some((l, v)) => Some(Modulation {
                gamma: real(l, v)?,
                profile: profile(s, &name, horizon)?,
            }),
            None => {
                if s.get("profile").is_some() {
                    return Err(parse_err(s.line, format!("[{name}] has a profile but no gamma")));
                }
                None
            }
        };
        Ok(RandomInput {
            deterministic,
            modulated,
        })
    };

    let problem = SlqProblem {
        n,
        m,
        horizon,
        a: coef("coef.A", n, n)?,
        b: coef("coef.B", n, m)?,
        c: coef("coef.C", n, n)?,
        d: coef("coef.D", n, m)?,
        q: coef("coef.Q", n, n)?,
        s: coef("coef.S", m, n)?,
        r: coef("coef.R", m, m)?,
        g,
        g_lin,
        inputs: Inputs {
            b: input("b", n)?,
            sigma: input("sigma", n)?,
            q: input("q", n)?,
            rho: input("rho", m)?,
        },
    };
    let report = problem.validate();
    if !report.is_ok() {
        return Err(invalid(format!("invalid problem: {}", report.violations.join("; "))));
    }

    let initial = match find("initial") {
        Some(s) => {
            let t = match s.get("t") {
                Some((l, v)) => real(l, v)?,
                None => 0.0,
            };
            let (l, v) = s.require("x", "initial")?;
            let x = Vector::from_column_slice(vector(l, v)?.as_slice());
            if x.len() != n {
                return Err(parse_err(l, format!("x has length {}, expected {n}", x.len())));
            }
            if !(t >= 0.0 && t < horizon) {
                return Err(parse_err(l, format!("initial time {t} outside [0, {horizon})")));
            }
            Some(InitialPair::new(t, x))
        }
        None => None,
    };
    Ok(ProblemFile { problem, initial })
}

/// Reads and parses a problem file.
pub fn load_problem(path: &Path) -> Result<ProblemFile> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_problem(&text)
}

fn fmt_matrix(m: &Matrix) -> String {
    (0..m.nrows())
        .map(|i| {
            (0..m.ncols())
                .map(|j| format!("{:?}", m[(i, j)]))
                .collect::<Vec<_>>()
                .join(", ")
        })
        .collect::<Vec<_>>()
        .join("; ")
}

fn fmt_vector(m: &Matrix) -> String {
    m.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ")
}

fn write_coef(out: &mut String, f: &CoefFn, as_vector: bool) {
    let fmt = |m: &Matrix| if as_vector { fmt_vector(m) } else { fmt_matrix(m) };
    match f {
        CoefFn::Constant(m) => writeln!(out, "value = {}", fmt(m)).unwrap(),
        CoefFn::Table(t) => {
            for (s, m) in t.grid().iter().zip(t.values()) {
                writeln!(out, "{s:?} : {}", fmt(m)).unwrap();
            }
        }
    }
}

/// Writes a problem in the file format; [`parse_problem`] reads it back
/// exactly.
pub fn write_problem(p: &SlqProblem, initial: Option<&InitialPair>) -> String {
    let mut out = String::new();
    writeln!(out, "[dims]\nn = {}\nm = {}\n", p.n, p.m).unwrap();
    writeln!(out, "[horizon]\nT = {:?}\n", p.horizon).unwrap();
    for (name, f) in [
        ("A", &p.a),
        ("B", &p.b),
        ("C", &p.c),
        ("D", &p.d),
        ("Q", &p.q),
        ("S", &p.s),
        ("R", &p.r),
    ] {
        writeln!(out, "[coef.{name}]").unwrap();
        write_coef(&mut out, f, false);
        out.push('\n');
    }
    writeln!(
        out,
        "[terminal]\nG = {}\ng = {}\n",
        fmt_matrix(p.g.as_matrix()),
        p.g_lin.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ")
    )
    .unwrap();
    for (name, input) in p.inputs.named() {
        if input.is_zero() {
            continue;
        }
        writeln!(out, "[input.{name}]").unwrap();
        write_coef(&mut out, &input.deterministic, true);
        if let Some(m) = &input.modulated {
            writeln!(out, "gamma = {:?}", m.gamma).unwrap();
            match &m.profile {
                ScalarProfile::Exp { scale, rate } => writeln!(
                    out,
                    "profile = named:exp\nprofile_scale = {scale:?}\nprofile_rate = {rate:?}"
                )
                .unwrap(),
                ScalarProfile::ExpOverSqrtGap { scale, rate, end } => writeln!(
                    out,
                    "profile = named:exp-over-sqrt-gap\nprofile_scale = {scale:?}\nprofile_rate = {rate:?}\nprofile_end = {end:?}"
                )
                .unwrap(),
                ScalarProfile::Table(t) => {
                    writeln!(out, "profile = table").unwrap();
                    for (s, v) in t.grid().iter().zip(t.values()) {
                        writeln!(out, "profile({s:?}) = {:?}", v[(0, 0)]).unwrap();
                    }
                }
            }
        }
        out.push('\n');
    }
    if let Some(ip) = initial {
        writeln!(out, "[initial]\nt = {:?}\nx = {}", ip.t, fmt_vector(&Matrix::from_column_slice(ip.x.len(), 1, ip.x.as_slice()))).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{builtin, BUILTIN_NAMES};

    const REFERENCE: [(&str, &str); 3] = [
        ("example-1.1", include_str!("../problems/example-1.1.slq")),
        ("example-5.1", include_str!("../problems/example-5.1.slq")),
        ("standard-scalar", include_str!("../problems/standard-scalar.slq")),
    ];

    #[test]
    fn reference_files_match_builtins() {
        for (name, text) in REFERENCE {
            let parsed = parse_problem(text).unwrap();
            let (p, ip) = builtin(name).unwrap();
            assert_eq!(parsed.problem, p, "{name}");
            assert_eq!(parsed.initial, Some(ip), "{name}");
        }
        assert_eq!(REFERENCE.len(), BUILTIN_NAMES.len());
    }

    #[test]
    fn builtins_round_trip() {
        for name in BUILTIN_NAMES {
            let (p, ip) = builtin(name).unwrap();
            let back = parse_problem(&write_problem(&p, Some(&ip))).unwrap();
            assert_eq!(back.problem, p);
            assert_eq!(back.initial, Some(ip));
        }
    }

    #[test]
    fn tables_and_vectors() {
        let text = "[dims]\nn = 2\nm = 1\n[horizon]\nT = 2\n\
                    [coef.A]\n0 : 1, 0; 0, 1\n2 : 3, 0; 0, 3\n\
                    [coef.R]\nvalue = 1\n\
                    [input.b]\nvalue = 1; 2\n\
                    [input.rho]\ngamma = 0.5\nprofile = table\nprofile(0) = 1\nprofile(2) = 3\n\
                    [initial]\nx = 1, 2\n";
        // A modulated input on a 2-dimensional state is rejected by validation.
        assert!(matches!(parse_problem(text), Err(Error::InvalidInput(m)) if m.contains("scalar state")));
        let text = text.replace("[input.rho]\ngamma = 0.5\nprofile = table\nprofile(0) = 1\nprofile(2) = 3\n", "");
        let parsed = parse_problem(&text).unwrap();
        let p = parsed.problem;
        assert_eq!(p.eval_coef(crate::problem::Coef::A, 1.0).unwrap()[(1, 1)], 2.0);
        assert_eq!(p.inputs.b.deterministic.eval(0.0).shape(), (2, 1));
        assert_eq!(parsed.initial.unwrap().x.as_slice(), &[1.0, 2.0]);
        assert_eq!(p.c.eval(0.3), Matrix::zeros(2, 2));
        let back = parse_problem(&write_problem(&p, None)).unwrap();
        assert_eq!(back.problem, p);
    }

    #[test]
    fn profile_tables() {
        let text = "[dims]\nn = 1\nm = 1\n[horizon]\nT = 1\n[coef.R]\nvalue = 1\n\
                    [input.b]\ngamma = 0.5\nprofile = table\nprofile(0) = 1\nprofile(1) = 3\n";
        let p = parse_problem(text).unwrap().problem;
        let m = p.inputs.b.modulated.as_ref().unwrap();
        assert_eq!(m.profile.eval(0.5), 2.0);
        assert_eq!(parse_problem(&write_problem(&p, None)).unwrap().problem, p);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let cases = [
            ("[dims]\nn = 1\nm = x\n", 3),
            ("n = 1\n", 1),
            ("[dims]\nn = 1\nm = 1\n[horizon]\nT = 1\n[coef.A]\nvalue = 1, 2; 3\n", 7),
            ("[dims]\nn = 1\nm = 1\n[horizon]\nT = 1\n[coef.Z]\n", 6),
            ("[dims]\nn = 1\nm = 1\n[horizon]\nT = 1\n[coef.A]\n0 : 1\n0 : 2\n", 8),
            ("[dims]\nn = 1\nm = 1\n[horizon]\nT = 1\n[input.b]\ngamma = 1\nprofile = named:nope\n", 8),
            ("[dims]\nn = 1\nn = 2\n", 3),
        ];
        for (text, line) in cases {
            match parse_problem(text) {
                Err(Error::Parse { line: got, .. }) => assert_eq!(got, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn invalid_problems_are_rejected() {
        let text = "[dims]\nn = 2\nm = 1\n[horizon]\nT = 1\n[coef.Q]\nvalue = 1, 2; 0, 1\n";
        match parse_problem(text) {
            Err(Error::InvalidInput(m)) => assert!(m.contains("Q not symmetric")),
            other => panic!("{other:?}"),
        }
        let text = "[dims]\nn = 1\nm = 1\n[horizon]\nT = -1\n";
        assert!(parse_problem(text).is_err());
    }
}
