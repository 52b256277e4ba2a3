use super::*;

fn summary(fused: f64, lambda: f64) -> RunSummary {
    RunSummary {
        fused_miou: fused,
        aux_miou: fused - 0.01,
        primary_miou: fused - 0.005,
        disagreement_rate: 0.1,
        per_class_iou: vec![0.9, fused, fused, fused, 0.2],
        best_iter: 100,
        last_disagreement_rate: 0.05,
        lambda_mr: lambda,
        seconds: 1.5,
    }
}

fn fake_run_dir(arms: &[&str], seeds: &[u64], failed: &[(&str, u64)]) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let mut plan = format!(
        "seeds={}\n",
        seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
    );
    for (i, a) in arms.iter().enumerate() {
        plan.push_str(&format!("arm={a}\n"));
        for &s in seeds {
            let d = run_dir(dir.path(), a, s);
            fs::create_dir_all(&d).unwrap();
            if failed.contains(&(a, s)) {
                fs::write(d.join(FAILED_FILE), "boom\n").unwrap();
            } else {
                let lambda = a.strip_prefix("lambda_").map_or(0.1, |l| l.parse().unwrap());
                fs::write(d.join(METRICS_FILE), summary(0.3 + 0.01 * i as f64 + 0.001 * s as f64, lambda).to_text()).unwrap();
            }
        }
    }
    fs::write(dir.path().join(PLAN_FILE), plan).unwrap();
    dir
}

#[test]
fn default_plan_has_ablation_and_sweep_arms() {
    let plan = ExperimentPlan::default_plan(TrainConfig::default(), vec![0, 1, 2]);
    let names: Vec<&str> = plan.arms.iter().map(|a| a.name.as_str()).collect();
    for n in ["source_only", "adv_only", "mr_only", "full_stage1", "pseudo_only", "full_stage2"] {
        assert!(names.contains(&n), "{n}");
    }
    assert_eq!(names.iter().filter(|n| n.starts_with("lambda_")).count(), 6);
    plan.validate().unwrap();
}

#[test]
fn arms_resolve_to_the_ablation_settings() {
    let base = TrainConfig::default();
    let plan = ExperimentPlan::default_plan(base.clone(), vec![0]);
    let get = |n: &str| plan.arms.iter().find(|a| a.name == n).unwrap().resolve(&base).unwrap();
    let so = get("source_only");
    assert!(!so.adversarial());
    assert_eq!(so.loss_weights.lambda_mr, 0.0);
    assert_eq!(get("adv_only").loss_weights.lambda_mr, 0.0);
    assert!(get("adv_only").adversarial());
    assert!(!get("mr_only").adversarial());
    assert_eq!(get("mr_only").loss_weights.lambda_mr, 0.1);
    assert_eq!(get("full_stage1"), base);
    assert_eq!(get("lambda_0.05").loss_weights.lambda_mr, 0.05);
}

#[test]
fn plan_file_selects_arms_and_pulls_parents() {
    let plan = ExperimentPlan::parse("seeds = 4,5\narms = source_only, full_stage2\nstage1_iters = 50\n").unwrap();
    let names: Vec<&str> = plan.arms.iter().map(|a| a.name.as_str()).collect();
    assert_eq!(names, ["source_only", "full_stage1", "full_stage2"]);
    assert_eq!(plan.seeds, [4, 5]);
    assert_eq!(plan.base.stage1_iters, 50);
}

#[test]
fn plan_file_custom_arms() {
    let plan = ExperimentPlan::parse(
        "arms = full_stage1\narm.both_grad = mr_detach_mode=both\narm.st2 = stage=2; parent=both_grad; lambda_mr=0.2\n",
    )
    .unwrap();
    let st2 = plan.arms.iter().find(|a| a.name == "st2").unwrap();
    assert_eq!(st2.stage, ArmStage::Two { parent: "both_grad".into() });
    assert_eq!(st2.resolve(&plan.base).unwrap().loss_weights.lambda_mr, 0.2);
}

#[test]
fn plan_file_errors() {
    assert!(matches!(ExperimentPlan::parse("arms = nope"), Err(Error::Parse { line: 1, .. })));
    assert!(matches!(ExperimentPlan::parse("bogus = 1"), Err(Error::Parse { .. })));
    assert!(ExperimentPlan::parse("arm.x = stage=2").is_err());
    assert!(ExperimentPlan::parse("arm.x = stage=2; parent=missing").is_err());
    assert!(ExperimentPlan::parse("arm.x = banana=1").is_err());
    assert!(ExperimentPlan::parse("arm.source_only = lambda_mr=0.3").is_err());
    assert!(ExperimentPlan::parse("seeds = a").is_err());
}

#[test]
fn summary_text_round_trips() {
    let s = summary(0.4321, 0.05);
    assert_eq!(RunSummary::from_text(&s.to_text()).unwrap(), s);
}

#[test]
fn report_has_row_per_run_plus_means() {
    let dir = fake_run_dir(&["a", "b"], &[0], &[]);
    let table = emit_report(dir.path()).unwrap();
    assert_eq!(table.rows.len(), 2);
    assert_eq!(table.means.len(), 2);
    let csv = fs::read_to_string(dir.path().join(ReportTable::CSV_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 + 2);
    assert!(csv.lines().any(|l| l.starts_with("a,mean,ok,0.300000")));
    let text = fs::read_to_string(dir.path().join(ReportTable::TEXT_FILE)).unwrap();
    assert_eq!(text, render_text(&csv));
    assert!(text.contains("30.00"));
}

#[test]
fn failed_runs_are_marked() {
    let dir = fake_run_dir(&["a", "b"], &[0, 1], &[("b", 1)]);
    let table = emit_report(dir.path()).unwrap();
    assert!(matches!(&table.rows[3].status, RowStatus::Failed(m) if m.contains("boom")));
    assert_eq!(table.mean("b").unwrap().completed, 1);
    let csv = table.to_csv();
    assert!(csv.contains("b,1,FAILED,"));
    let cols = csv.lines().next().unwrap().split(',').count();
    assert!(csv.lines().all(|l| l.split(',').count() == cols));
}

#[test]
fn lambda_series_is_sorted_and_complete() {
    let arms = ["lambda_0.5", "lambda_0", "lambda_0.1", "lambda_0.01", "lambda_0.2", "lambda_0.05"];
    let dir = fake_run_dir(&arms, &[0, 1, 2], &[]);
    let table = emit_report(dir.path()).unwrap();
    let series = table.lambda_series();
    let lambdas: Vec<f64> = series.iter().map(|p| p.0).collect();
    assert_eq!(lambdas, [0.0, 0.01, 0.05, 0.1, 0.2, 0.5]);
    let file = fs::read_to_string(dir.path().join(ReportTable::LAMBDA_FILE)).unwrap();
    assert_eq!(file.lines().count(), 7);
}

#[test]
fn report_is_idempotent() {
    let dir = fake_run_dir(&["a", "lambda_0"], &[0, 1], &[("a", 0)]);
    emit_report(dir.path()).unwrap();
    let read = |f: &str| fs::read(dir.path().join(f)).unwrap();
    let first = [read(ReportTable::CSV_FILE), read(ReportTable::TEXT_FILE), read(ReportTable::LAMBDA_FILE)];
    emit_report(dir.path()).unwrap();
    let second = [read(ReportTable::CSV_FILE), read(ReportTable::TEXT_FILE), read(ReportTable::LAMBDA_FILE)];
    assert_eq!(first, second);
}

#[test]
fn report_without_plan_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(emit_report(dir.path()).is_err());
}

#[test]
fn tiny_ablation_runs_end_to_end() {
    let base = TrainConfig {
        stage1_iters: 4,
        stage2_iters: 2,
        eval_every: 2,
        train_pool: 4,
        val_count: 2,
        eval_count: 2,
        crop: 32,
        lambda_mr_sweep: vec![0.0, 0.1],
        ..TrainConfig::default()
    };
    let plan = ExperimentPlan::default_plan(base, vec![0]);
    let dir = tempfile::tempdir().unwrap();
    let table = ablate(&plan, dir.path()).unwrap();
    assert_eq!(table.rows.len(), plan.arms.len());
    assert!(table.rows.iter().all(|r| matches!(r.status, RowStatus::Ok(_))));
    // lambda_0.1 and full_stage1 resolve to the same config and share a run.
    assert_eq!(
        table.summary("lambda_0.1", 0).unwrap().fused_miou,
        table.summary("full_stage1", 0).unwrap().fused_miou
    );
    for f in [CHECKPOINT_FILE, TRACE_FILE, CONFIG_FILE, METRICS_FILE] {
        assert!(run_dir(dir.path(), "full_stage2", 0).join(f).exists(), "{f}");
    }
    assert_eq!(table.lambda_series().len(), 2);
}
