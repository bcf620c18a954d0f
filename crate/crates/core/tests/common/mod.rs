#![allow(dead_code)]

use dynrecon::hierarchy::Hierarchy;
use dynrecon::io::SeriesPanel;
use dynrecon::synthetic::{simulate, SimConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// T → {A, B, C}; A → A1..A4; B → B1..B3; C → C1..C3.
pub fn fig1() -> Hierarchy {
    let mut edges = vec![("T", "A"), ("T", "B"), ("T", "C")];
    edges.extend([("A", "A1"), ("A", "A2"), ("A", "A3"), ("A", "A4")]);
    edges.extend([("B", "B1"), ("B", "B2"), ("B", "B3")]);
    edges.extend([("C", "C1"), ("C", "C2"), ("C", "C3")]);
    Hierarchy::from_edges(&edges).unwrap()
}

pub fn toy_panel(h: &Hierarchy, t_len: usize, seed: u64) -> SeriesPanel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SimConfig {
        t_len,
        season: Some((12, 2.0)),
        ..SimConfig::default()
    };
    let rows = simulate(h, &cfg, &mut rng).unwrap();
    SeriesPanel {
        times: (0..t_len).map(|t| t.to_string()).collect(),
        rows,
    }
}
