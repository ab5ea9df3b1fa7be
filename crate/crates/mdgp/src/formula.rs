//! Formula syntax for kernel expressions.
//!
//! ```text
//! formula := response '~' term ('+' term)*
//! term    := factor ('*' factor)*
//! factor  := 'gp' '(' name ')'          EQ kernel on a continuous covariate
//!          | 'zs' '(' name ')'          zero-sum kernel on a categorical covariate
//!          | 'cat' '(' name ')'         user-supplied C x C kernel matrix
//!          | 'bin' '(' name ':' label (',' label)* ')'   binary mask kernel
//! ```
//!
//! Example: `y ~ gp(age) + gp(age)*zs(id)` is an additive model with a shared
//! age effect plus a zero-sum group deviation. `cat(z)` requires a matrix for
//! `z` supplied out of band (the CLI loads it from a CSV file). Compound-
//! symmetry kernels have no formula syntax — they are constructed through the
//! API (or as a `cat` matrix) — but they still print as `cs(name)` for
//! display purposes.
//!
//! Names and labels may not contain whitespace or the reserved characters
//! `~ + * ( ) : ,`.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::kernel::{BaseKernel, CovariateSpace, KernelExpr, KernelTerm};

/// Side channel for `cat(name)` factors: kernel matrix per covariate name.
pub type CustomMatrices = BTreeMap<String, DMatrix<f64>>;

/// A parsed model formula: the response column name and the kernel structure.
#[derive(Debug, Clone, PartialEq)]
pub struct Formula {
    pub response: String,
    pub expr: KernelExpr,
}

const RESERVED: &[char] = &['~', '+', '*', '(', ')', ':', ','];

fn check_ident(s: &str, what: &str) -> Result<()> {
    if s.is_empty() {
        return Err(Error::Formula(format!("empty {what}")));
    }
    if s.chars()
        .any(|c| c.is_whitespace() || RESERVED.contains(&c))
    {
        return Err(Error::Formula(format!("invalid {what} `{s}`")));
    }
    Ok(())
}

/// Split `factor` text of the shape `kind(arg)` into its two parts.
fn split_call(factor: &str) -> Result<(&str, &str)> {
    let open = factor
        .find('(')
        .ok_or_else(|| Error::Formula(format!("expected `kind(...)`, got `{factor}`")))?;
    if !factor.ends_with(')') {
        return Err(Error::Formula(format!("missing `)` in `{factor}`")));
    }
    let kind = factor[..open].trim();
    let arg = &factor[open + 1..factor.len() - 1];
    Ok((kind, arg))
}

fn lookup_dim(name: &str, space: &CovariateSpace, factor: &str) -> Result<usize> {
    check_ident(name, "covariate name")?;
    space
        .index_of(name)
        .ok_or_else(|| Error::Formula(format!("unknown covariate `{name}` in `{factor}`")))
}

fn parse_factor(
    factor: &str,
    space: &CovariateSpace,
    custom: &CustomMatrices,
) -> Result<BaseKernel> {
    let factor = factor.trim();
    let (kind, arg) = split_call(factor)?;
    match kind {
        "gp" => {
            let dim = lookup_dim(arg.trim(), space, factor)?;
            Ok(BaseKernel::Eq { dim })
        }
        "zs" => {
            let dim = lookup_dim(arg.trim(), space, factor)?;
            Ok(BaseKernel::Zs { dim })
        }
        "cat" => {
            let name = arg.trim();
            let dim = lookup_dim(name, space, factor)?;
            let matrix = custom.get(name).cloned().ok_or_else(|| {
                Error::Formula(format!("no custom kernel matrix supplied for `{name}`"))
            })?;
            Ok(BaseKernel::CustomCat { dim, matrix })
        }
        "bin" => {
            let (name, levels) = arg.split_once(':').ok_or_else(|| {
                Error::Formula(format!("expected `bin(name: levels)`, got `{factor}`"))
            })?;
            let dim = lookup_dim(name.trim(), space, factor)?;
            let labels = space.labels(dim)?;
            let mut masked = BTreeSet::new();
            for level in levels.split(',') {
                let level = level.trim();
                check_ident(level, "category label")?;
                let idx = labels.iter().position(|l| l == level).ok_or_else(|| {
                    Error::Formula(format!(
                        "unknown category `{level}` for `{}` in `{factor}`",
                        name.trim()
                    ))
                })?;
                masked.insert(idx);
            }
            Ok(BaseKernel::Bin { dim, masked })
        }
        other => Err(Error::Formula(format!(
            "unknown kernel `{other}` in `{factor}`"
        ))),
    }
}

fn parse_term(text: &str, space: &CovariateSpace, custom: &CustomMatrices) -> Result<KernelTerm> {
    if text.trim().is_empty() {
        return Err(Error::Formula("empty term (stray `+`?)".into()));
    }
    let mut continuous = Vec::new();
    let mut categorical = Vec::new();
    for factor in text.split('*') {
        match parse_factor(factor, space, custom)? {
            BaseKernel::Eq { dim } => continuous.push(dim),
            base => categorical.push(base),
        }
    }
    Ok(KernelTerm {
        continuous,
        categorical,
    })
}

/// Parse a model formula against a covariate space. `custom` supplies the
/// kernel matrices referenced by `cat(name)` factors (pass an empty map when
/// the formula has none).
pub fn parse_formula(
    text: &str,
    space: &CovariateSpace,
    custom: &CustomMatrices,
) -> Result<Formula> {
    let mut sides = text.split('~');
    let (lhs, rhs) = match (sides.next(), sides.next(), sides.next()) {
        (Some(l), Some(r), None) => (l.trim(), r.trim()),
        (_, None, _) => return Err(Error::Formula(format!("missing `~` in `{text}`"))),
        _ => return Err(Error::Formula(format!("more than one `~` in `{text}`"))),
    };
    check_ident(lhs, "response name")?;
    if rhs.is_empty() {
        return Err(Error::Formula("formula has no terms".into()));
    }
    let terms = rhs
        .split('+')
        .map(|t| parse_term(t, space, custom))
        .collect::<Result<Vec<_>>>()?;
    let expr = KernelExpr::new(terms, space)?;
    Ok(Formula {
        response: lhs.to_string(),
        expr,
    })
}

fn format_factor(base: &BaseKernel, space: &CovariateSpace) -> String {
    let name = space.dim(base.dim()).name();
    match base {
        BaseKernel::Eq { .. } => format!("gp({name})"),
        BaseKernel::Zs { .. } => format!("zs({name})"),
        BaseKernel::Cs { .. } => format!("cs({name})"),
        BaseKernel::CustomCat { .. } => format!("cat({name})"),
        BaseKernel::Bin { masked, .. } => {
            let labels = space.labels(base.dim()).expect("validated bin dimension");
            let levels: Vec<&str> = masked.iter().map(|&i| labels[i].as_str()).collect();
            format!("bin({name}: {})", levels.join(","))
        }
    }
}

/// Render a formula back to text. Inverse of [`parse_formula`] on formulas it
/// accepts (CS factors print as `cs(name)`, which has no parse syntax).
pub fn format_formula(formula: &Formula, space: &CovariateSpace) -> String {
    let terms: Vec<String> = formula
        .expr
        .terms
        .iter()
        .map(|term| {
            let mut parts: Vec<String> = term
                .continuous
                .iter()
                .map(|&dim| format_factor(&BaseKernel::Eq { dim }, space))
                .collect();
            parts.extend(term.categorical.iter().map(|b| format_factor(b, space)));
            parts.join("*")
        })
        .collect();
    format!("{} ~ {}", formula.response, terms.join(" + "))
}
