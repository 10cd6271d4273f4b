//! Config files through the public entry point.

use dial::attack::{InnerLoss, Norm};
use dial::config::{parse_config, RawConfig, RunConfig};
use dial::loss::Objective;

const TEXT: &str = "\
# attack list
[run]
seed = 4

[data]
name = gauss_mix
classes = 3

[train]
method = trades

[attack.0]
name = pgd20
eps = 0.3
step = 0.01
iters = 20

[attack.1]
name = l2
norm = l2
eps = 1.5
inner_loss = cw_margin
";

#[test]
fn attack_sections_resolve_in_order() {
    let cfg = RunConfig::resolve(&RawConfig::parse(TEXT, "inline").unwrap()).unwrap();
    assert_eq!(cfg.attacks.len(), 2);
    assert_eq!(cfg.attacks[0].name, "pgd20");
    assert_eq!(cfg.attacks[0].spec.eps, 0.3);
    assert_eq!(cfg.attacks[0].spec.iters, 20);
    assert_eq!(cfg.attacks[1].spec.norm, Norm::L2);
    assert_eq!(cfg.attacks[1].spec.inner_loss, InnerLoss::CwMargin);
    assert!(matches!(cfg.train.objective, Objective::Trades { .. }));
}

#[test]
fn flags_override_and_the_lock_text_reparses() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.conf");
    std::fs::write(&path, TEXT).unwrap();
    let flags = ["--attack.0.eps".to_string(), "0.2".to_string(), "--run.seed=9".to_string()];
    let (_, cfg) = parse_config(Some(&path), &flags).unwrap();
    assert_eq!(cfg.attacks[0].spec.eps, 0.2);
    assert_eq!(cfg.seed, 9);
    let again = RunConfig::resolve(&RawConfig::parse(&cfg.to_text(), "lock").unwrap()).unwrap();
    assert_eq!(again.to_text(), cfg.to_text());
    assert_eq!(again.attacks[1].spec, cfg.attacks[1].spec);
}

#[test]
fn unknown_keys_are_rejected_with_a_suggestion() {
    let err = RawConfig::parse("[dial]\nlamda = 2\n", "inline").unwrap_err().to_string();
    assert!(err.contains("dial.lambda"), "{err}");
}
