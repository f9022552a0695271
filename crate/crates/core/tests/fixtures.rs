use promptmil::data::{generate_synthetic_dataset, SyntheticSpec};
use promptmil::descriptions::DescriptionBank;
use promptmil::selection::TemplateBank;
use promptmil::{Error, ModelConfig, Scale};

fn fixture(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

#[test]
fn description_fixture_loads_with_default_counts() {
    let cfg = ModelConfig::default();
    let bank = DescriptionBank::load(fixture("descriptions.txt"), &cfg).unwrap();
    assert_eq!(bank.num_classes(), 2);
    assert_eq!(bank.flattened(Scale::Low).len(), 2 * 10);
    assert_eq!(bank.flattened(Scale::High).len(), 2 * 30);
    assert!(!bank.provenance.is_empty());
    let wrong = ModelConfig { c_high: 29, ..ModelConfig::default() };
    let err = DescriptionBank::load(fixture("descriptions.txt"), &wrong).unwrap_err();
    assert!(matches!(err, Error::Bank(ref m) if m.contains("alpha") && m.contains("high")), "{err}");
}

#[test]
fn template_fixture_loads() {
    let bank = TemplateBank::load(fixture("templates.txt")).unwrap();
    assert_eq!(bank.num_classes(), 2);
    assert!(bank.categories.iter().all(|(_, t)| t.len() == 50));
}

#[test]
fn fixtures_match_the_default_generator() {
    let (ds, _) = generate_synthetic_dataset(&SyntheticSpec::default()).unwrap();
    let bank = DescriptionBank::load(fixture("descriptions.txt"), &ModelConfig::default()).unwrap();
    let templates = TemplateBank::load(fixture("templates.txt")).unwrap();
    assert_eq!(bank, ds.bank);
    assert_eq!(templates, ds.templates);
}
