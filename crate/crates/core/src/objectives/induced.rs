//! Exact check that an injective embedding table induces a latent group
//! action `t_Z(g, z) = f(t_X(g, f^-1(z)))`.

use std::collections::HashMap;

use serde::Serialize;

use crate::error::{Error, Result};

/// A finite group acting on a finite set, both given by tables.
///
/// `product[g][h]` is the index of `g h`; `action[g][x]` is the index of
/// `t_X(g, x)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActionTable {
    pub identity: usize,
    pub product: Vec<Vec<usize>>,
    pub action: Vec<Vec<usize>>,
}

impl ActionTable {
    /// `C_n` acting on the `n` cyclic shifts of a signal.
    pub fn cyclic(n: usize) -> Self {
        let table: Vec<Vec<usize>> = (0..n).map(|g| (0..n).map(|h| (g + h) % n).collect()).collect();
        Self {
            identity: 0,
            product: table.clone(),
            action: table,
        }
    }

    fn order(&self) -> usize {
        self.product.len()
    }

    fn validate(&self, points: usize) -> Result<()> {
        let n = self.order();
        if self.identity >= n
            || self
                .product
                .iter()
                .any(|r| r.len() != n || r.iter().any(|&v| v >= n))
        {
            return Err(Error::config("malformed group multiplication table"));
        }
        if self.action.len() != n
            || self
                .action
                .iter()
                .any(|r| r.len() != points || r.iter().any(|&v| v >= points))
        {
            return Err(Error::config(format!(
                "action table must map each of {n} elements over {points} points"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "axiom", rename_all = "snake_case")]
pub enum Violation {
    /// `t_Z(e, z) != z`
    Identity { point: usize },
    /// `t_Z(g, t_Z(h, z)) != t_Z(g h, z)`
    Composition { g: usize, h: usize, point: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct InducedActionReport {
    pub points: usize,
    pub group_order: usize,
    pub checks: usize,
    pub violations: Vec<Violation>,
}

impl InducedActionReport {
    pub fn is_action(&self) -> bool {
        self.violations.is_empty()
    }
}

fn key(z: &[f64]) -> Vec<u64> {
    z.iter().map(|v| v.to_bits()).collect()
}

struct Induced<'a> {
    f: &'a [Vec<f64>],
    inverse: HashMap<Vec<u64>, usize>,
    table: &'a ActionTable,
}

impl Induced<'_> {
    fn act(&self, g: usize, z: &[f64]) -> &[f64] {
        // every latent handed in here is f of some point
        let x = self.inverse[&key(z)];
        &self.f[self.table.action[g][x]]
    }
}

/// Builds the induced latent action from `f_table` (row `x` is `f(x)`) and
/// checks the identity and compatibility axioms exactly, bit for bit.
pub fn verify_induced_action(f_table: &[Vec<f64>], table: &ActionTable) -> Result<InducedActionReport> {
    let points = f_table.len();
    table.validate(points)?;
    let mut inverse = HashMap::with_capacity(points);
    for (x, z) in f_table.iter().enumerate() {
        if let Some(&first) = inverse.get(&key(z)) {
            log::error!("embedding table collides at points {first} and {x}");
            return Err(Error::NotInjective { first, second: x });
        }
        inverse.insert(key(z), x);
    }
    let induced = Induced {
        f: f_table,
        inverse,
        table,
    };

    let mut violations = Vec::new();
    let mut checks = 0;
    for (x, z) in f_table.iter().enumerate() {
        checks += 1;
        if key(induced.act(table.identity, z)) != key(z) {
            violations.push(Violation::Identity { point: x });
        }
    }
    for g in 0..table.order() {
        for h in 0..table.order() {
            for (x, z) in f_table.iter().enumerate() {
                checks += 1;
                let lhs = induced.act(g, induced.act(h, z));
                let rhs = induced.act(table.product[g][h], z);
                if key(lhs) != key(rhs) {
                    violations.push(Violation::Composition { g, h, point: x });
                }
            }
        }
    }
    if !violations.is_empty() {
        log::warn!("{} induced-action axiom violations", violations.len());
    }
    Ok(InducedActionReport {
        points,
        group_order: table.order(),
        checks,
        violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_table(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn cyclic_shifts_induce_an_action() {
        let report = verify_induced_action(&random_table(8, 3, 1), &ActionTable::cyclic(8)).unwrap();
        assert!(report.is_action());
        assert_eq!(report.checks, 8 + 8 * 8 * 8);
    }

    #[test]
    fn constant_embedding_is_rejected() {
        let f = vec![vec![0.5, 0.5]; 8];
        match verify_induced_action(&f, &ActionTable::cyclic(8)) {
            Err(Error::NotInjective { first, second }) => assert_eq!((first, second), (0, 1)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn corrupted_action_entry_is_detected() {
        let mut table = ActionTable::cyclic(8);
        table.action[3][5] = 6;
        let report = verify_induced_action(&random_table(8, 3, 2), &table).unwrap();
        assert!(!report.is_action());
        assert!(report
            .violations
            .iter()
            .all(|v| matches!(v, Violation::Composition { .. })));
        // t(1, t(3, 5)) = t(1, 6) = 7 but t(4, 5) = 1
        assert!(report
            .violations
            .contains(&Violation::Composition { g: 1, h: 3, point: 5 }));
    }

    #[test]
    fn corrupted_identity_row_is_detected() {
        let mut table = ActionTable::cyclic(4);
        table.action[0][1] = 2;
        let report = verify_induced_action(&random_table(4, 2, 3), &table).unwrap();
        assert!(report.violations.contains(&Violation::Identity { point: 1 }));
    }

    #[test]
    fn malformed_tables_are_config_errors() {
        let mut table = ActionTable::cyclic(4);
        table.action.pop();
        assert!(matches!(
            verify_induced_action(&random_table(4, 2, 0), &table),
            Err(Error::Config(_))
        ));
    }
}
