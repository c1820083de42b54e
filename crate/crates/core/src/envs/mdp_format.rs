//! Plain-text FiniteMdp files.
//!
//! ```text
//! # comments and blank lines are ignored
//! states=2 dims=2,1 gamma=0.9 init=0.5,0.5
//! 0.9 0.1          <- P[s=0][a=0][:]
//! 0.2 0.8          <- P[s=0][a=1][:]
//! ...              (states x joint-actions rows of `states` numbers)
//! 1.0 -0.5         <- r[s=0][:]
//! ...              (states rows of joint-action-count numbers)
//! ```
//!
//! `init` is optional and defaults to the uniform distribution. Joint actions
//! are ordered row-major over `dims`.

use std::fmt::Write as _;

use super::mdp::FiniteMdp;
use crate::error::{Error, Result};

pub fn parse_mdp(text: &str) -> Result<FiniteMdp> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(k, l)| (k + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (hline, header) = lines.next().ok_or(Error::Parse {
        line: 0,
        detail: "empty file".into(),
    })?;
    let mut n_states = None;
    let mut dims = None;
    let mut gamma = None;
    let mut init = None;
    for tok in header.split_whitespace() {
        let (key, val) = tok.split_once('=').ok_or_else(|| perr(hline, format!("expected key=value, got `{tok}`")))?;
        match key {
            "states" => n_states = Some(parse_num::<usize>(val, hline)?),
            "dims" => dims = Some(parse_list::<usize>(val, hline)?),
            "gamma" => gamma = Some(parse_num::<f64>(val, hline)?),
            "init" => init = Some(parse_list::<f64>(val, hline)?),
            other => return Err(perr(hline, format!("unknown header key `{other}`"))),
        }
    }
    let n_states = n_states.ok_or_else(|| perr(hline, "missing `states=`"))?;
    let dims = dims.ok_or_else(|| perr(hline, "missing `dims=`"))?;
    let gamma = gamma.ok_or_else(|| perr(hline, "missing `gamma=`"))?;
    if n_states == 0 || dims.is_empty() || dims.contains(&0) {
        return Err(perr(hline, "states and every action dimension must be positive"));
    }
    let na: usize = dims.iter().product();
    let initial = init.unwrap_or_else(|| vec![1.0 / n_states as f64; n_states]);
    if initial.len() != n_states {
        return Err(perr(hline, format!("init has {} entries, expected {n_states}", initial.len())));
    }

    let mut transition = Vec::with_capacity(n_states * na * n_states);
    for row in 0..n_states * na {
        let (ln, l) = lines.next().ok_or_else(|| {
            perr(0, format!("missing transition row {row} (s={}, a={})", row / na, row % na))
        })?;
        let vals = parse_row(l, ln, n_states)?;
        let total: f64 = vals.iter().sum();
        if vals.iter().any(|p| *p < 0.0) || (total - 1.0).abs() > 1e-12 {
            return Err(perr(ln, format!("transition row sums to {total} or has negative entries")));
        }
        transition.extend(vals);
    }
    let mut reward = Vec::with_capacity(n_states * na);
    for s in 0..n_states {
        let (ln, l) = lines.next().ok_or_else(|| perr(0, format!("missing reward row for state {s}")))?;
        reward.extend(parse_row(l, ln, na)?);
    }
    if let Some((ln, _)) = lines.next() {
        return Err(perr(ln, "unexpected trailing row"));
    }
    let mdp = FiniteMdp {
        n_states,
        action_dims: dims,
        transition,
        reward,
        initial,
        gamma,
    };
    mdp.validate().map_err(|e| perr(hline, e.to_string()))?;
    Ok(mdp)
}

/// Writes the canonical text form; `parse_mdp` reads it back bit-exactly.
pub fn write_mdp(mdp: &FiniteMdp) -> String {
    let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
    let mut out = String::new();
    let dims: Vec<String> = mdp.action_dims.iter().map(|d| d.to_string()).collect();
    let init: Vec<String> = mdp.initial.iter().map(|x| format!("{x:?}")).collect();
    let _ = writeln!(
        out,
        "states={} dims={} gamma={:?} init={}",
        mdp.n_states,
        dims.join(","),
        mdp.gamma,
        init.join(",")
    );
    let na = mdp.n_joint();
    let _ = writeln!(out, "# transitions: P[s][a][:]");
    for s in 0..mdp.n_states {
        for a in 0..na {
            let _ = writeln!(out, "{}", join(mdp.p_row(s, a)));
        }
    }
    let _ = writeln!(out, "# rewards: r[s][:]");
    for s in 0..mdp.n_states {
        let _ = writeln!(out, "{}", join(&mdp.reward[s * na..(s + 1) * na]));
    }
    out
}

fn perr(line: usize, detail: impl Into<String>) -> Error {
    Error::Parse {
        line,
        detail: detail.into(),
    }
}

fn parse_num<T: std::str::FromStr>(s: &str, line: usize) -> Result<T> {
    s.parse().map_err(|_| perr(line, format!("cannot parse `{s}`")))
}

fn parse_list<T: std::str::FromStr>(s: &str, line: usize) -> Result<Vec<T>> {
    s.split(',').map(|x| parse_num(x, line)).collect()
}

fn parse_row(l: &str, line: usize, expected: usize) -> Result<Vec<f64>> {
    let vals: Vec<f64> = l
        .split_whitespace()
        .map(|x| parse_num::<f64>(x, line))
        .collect::<Result<_>>()?;
    if vals.len() != expected {
        return Err(perr(line, format!("expected {expected} numbers, found {}", vals.len())));
    }
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(perr(line, "non-finite value"));
    }
    Ok(vals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const SMALL: &str = "\
# two states, one binary action dimension
states=2 dims=2 gamma=0.9
0.9 0.1
0.5 0.5
0.2 0.8
1 0
1.0 -1.0
0.0 0.5
";

    #[test]
    fn parses_small_file() {
        let mdp = parse_mdp(SMALL).unwrap();
        assert_eq!(mdp.n_states, 2);
        assert_eq!(mdp.initial, vec![0.5, 0.5]);
        assert_eq!(mdp.p(1, 1, 0), 1.0);
        assert_eq!(mdp.r(0, 1), -1.0);
    }

    #[test]
    fn short_row_reports_its_line() {
        let bad = SMALL.replace("0.5 0.5\n", "0.5\n");
        match parse_mdp(&bad) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn non_stochastic_row_rejected_with_line() {
        let bad = SMALL.replace("0.2 0.8", "0.2 0.7");
        match parse_mdp(&bad) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn garbage_and_trailing_rows_rejected() {
        assert!(parse_mdp(&SMALL.replace("1.0 -1.0", "1.0 x")).is_err());
        assert!(parse_mdp(&format!("{SMALL}1 2\n")).is_err());
        assert!(parse_mdp("states=2 gamma=0.9\n").is_err());
        assert!(parse_mdp("").is_err());
    }

    proptest! {
        #[test]
        fn write_then_parse_is_identity(seed in 0u64..1000, ns in 1usize..5, d0 in 1usize..4, d1 in 1usize..4) {
            let mdp = FiniteMdp::random(&mut ChaCha8Rng::seed_from_u64(seed), ns, &[d0, d1], 0.95, 0.01);
            let back = parse_mdp(&write_mdp(&mdp)).unwrap();
            prop_assert_eq!(back, mdp);
        }
    }
}
