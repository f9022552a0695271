mod common;

use common::*;
use promptmil::model::PromptedMil;

#[test]
fn full_loss_gradients_match_finite_differences() {
    check_gradients().unwrap();
}

#[test]
fn each_parameter_group_is_checked() {
    let (ds, cfg) = tiny_setup(4, 2, 5);
    let mut model = PromptedMil::for_dataset(cfg, &ds).unwrap();
    perturb(&mut model.store, 0.1, 5);
    let bag = model.prepare(&ds.bags[1]).unwrap();
    let report = gradcheck_model(&mut model, &bag, &["p_glob.", "p_vis.", "gen.", "gcn."]).unwrap();
    let names: Vec<&str> = report.iter().map(|(n, _)| n.as_str()).collect();
    for want in ["p_glob.0", "p_glob.1", "p_vis.0", "p_vis.1", "gen.w1", "gen.w2", "gcn.low.0", "gcn.high.0"] {
        assert!(names.contains(&want), "{want} not checked: {names:?}");
    }
}

#[test]
fn perturbing_global_prompts_moves_high_descriptions() {
    let (ds, cfg) = tiny_setup(4, 1, 6);
    let mut model = PromptedMil::for_dataset(cfg, &ds).unwrap();
    let (z_low, z_high) = model.description_embeddings().unwrap();
    let key = model.prompts.p_glob[0];
    model.store.get_mut(key).mapv_inplace(|v| v + 0.3);
    let (z_low2, z_high2) = model.description_embeddings().unwrap();
    assert_eq!(z_low, z_low2);
    assert!(z_high.iter().zip(z_high2.iter()).any(|(a, b)| (a - b).abs() > 1e-6));
}
