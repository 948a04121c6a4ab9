use std::time::Instant;

use lgcn_core::gradsuite::{run, Scope, SuiteOptions};

#[test]
fn full_suite_passes_at_default_tolerance() {
    let t = Instant::now();
    let reports = run(Scope::All, SuiteOptions::default());
    for r in &reports {
        println!("{:<32} {:.3e} {}", r.op, r.max_rel_error, if r.pass { "ok" } else { "FAIL" });
    }
    println!("{} checks in {:.1}s", reports.len(), t.elapsed().as_secs_f64());
    let failed: Vec<_> = reports.iter().filter(|r| !r.pass).map(|r| r.op.as_str()).collect();
    assert!(failed.is_empty(), "failing checks: {failed:?}");
}

#[test]
fn injected_bug_fails_every_check() {
    let opts = SuiteOptions {
        inject_bug: true,
        ..SuiteOptions::default()
    };
    for scope in [Scope::Tensor, Scope::Dfm, Scope::Fsa] {
        let reports = run(scope, opts);
        assert!(!reports.is_empty());
        for r in reports {
            assert!(!r.pass, "{} passed with a doubled gradient", r.op);
        }
    }
}
