mod common;

use common::{grid, gradient_check};
use trm_lab::augmentation::CanvasGrid;
use trm_lab::model::{init_params, ModelConfig};

#[test]
fn gradients_match_finite_differences() {
    let cfg = ModelConfig { d_model: 16, trunk_layers: 2, ffn_mult: 2, n_cycles: 4, id_vocab_size: 4, seed: 11 };
    let params = init_params::<f64>(&cfg).unwrap();
    let examples = vec![
        (
            CanvasGrid::at_origin(grid(2, 3, &[1, 2, 3, 0, 5, 6])),
            1,
            CanvasGrid::at_origin(grid(3, 2, &[6, 0, 5, 3, 2, 1])),
        ),
        (
            CanvasGrid::placed(grid(2, 2, &[7, 7, 8, 9]), 1, 2).unwrap(),
            3,
            CanvasGrid::placed(grid(2, 2, &[9, 8, 7, 7]), 1, 2).unwrap(),
        ),
    ];
    let report = gradient_check(&params, &examples, cfg.n_cycles, 1e-4, 6);
    for (name, err) in &report {
        println!("{name:32} max rel err {err:.3e}");
    }
    assert!(report.iter().all(|(_, e)| *e < 1e-3));
}
