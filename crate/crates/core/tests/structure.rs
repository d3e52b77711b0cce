use opf_relax::hierarchy::{apply_ly, localizing_matrix, moment_matrix, LiftedIndex};
use opf_relax::poly::{Exponent, Polynomial};

fn parse_table(text: &str) -> Vec<Vec<Exponent>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_whitespace()
                .map(|t| Exponent::from_vec(t.bytes().map(|b| b - b'0').collect()))
                .collect()
        })
        .collect()
}

#[test]
fn second_order_moment_matrix_matches_reference_table() {
    let table = parse_table(include_str!("data/m2_three_bus.txt"));
    assert_eq!(table.len(), 21);
    let idx = LiftedIndex::new(5, 2);
    let m = moment_matrix(&idx, 2);
    for (i, row) in table.iter().enumerate() {
        assert_eq!(row.len(), 21);
        for (j, e) in row.iter().enumerate() {
            let entry = m.entry(i, j);
            let slot = idx.slot(e).unwrap();
            assert_eq!(entry.terms.len(), 1, "({i},{j})");
            assert_eq!(entry.coefficient(slot), 1.0, "({i},{j}) expected {e:?}");
        }
    }
}

#[test]
fn voltage_limit_localizing_matrix_matches_reference_tables() {
    let text = include_str!("data/vmax2_localizing.txt");
    let blocks: Vec<_> = text.split("\n\n").map(parse_table).collect();
    assert_eq!(blocks.len(), 3);
    let vmax2 = 1.1f64 * 1.1;
    let x = |i| Polynomial::var(5, i);
    // Vmax² − V_d2² − V_q2² with variables (V_d1, V_d2, V_d3, V_q2, V_q3).
    let g = (&(&x(1) * &x(1)) + &(&x(3) * &x(3))).scale(-1.0).add_constant(vmax2);
    let idx = LiftedIndex::new(5, 2);
    let l = localizing_matrix(&g, &idx, 1).unwrap();
    assert_eq!(l.dim(), 6);
    for i in 0..6 {
        for j in 0..6 {
            let expected = Polynomial::from_terms(
                5,
                [
                    (blocks[0][i][j].clone(), vmax2),
                    (blocks[1][i][j].clone(), -1.0),
                    (blocks[2][i][j].clone(), -1.0),
                ],
            )
            .unwrap();
            assert_eq!(l.entry(i, j), &apply_ly(&expected, &idx).unwrap(), "({i},{j})");
        }
    }
}
