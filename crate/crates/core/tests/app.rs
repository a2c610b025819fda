use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;
use std::time::{Duration, Instant};

use dynens::app::{
    execute, gpu_count, load_config, parse_config, prepare, sim_stub_app, AppError, CommsSetting,
    StubParams, STUB_APP,
};
use dynens::executor::{Executor, Launcher};
use dynens::history::{self, NewPoint};
use dynens::resources::{detect_platform, PlatformOverrides};
use dynens::runtime::{
    run_ensemble, CompletionFlag, EnsembleConfig, ExitCriteria, GenFn, GiveSimWorkFirst,
};

const STUB: &str = env!("CARGO_BIN_EXE_forces_stub");
const DYNENS: &str = env!("CARGO_BIN_EXE_dynens");

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

const MINIMAL: &str = r#"
version = 1
nworkers = 2

[exit]
sim_max = 10

[gen]
function = "persistent_uniform"
[gen.user]
gen_batch_size = 5
lb = [0.0]
ub = [1.0]

[sim]
function = "norm"

[alloc]
function = "only_persistent_gens"
"#;

fn parse(text: &str) -> Result<dynens::app::RunConfig, AppError> {
    parse_config(text, Path::new("."))
}

fn field_of(e: AppError) -> String {
    match e {
        AppError::Field { field, .. } => field,
        other => panic!("expected a field error, got {other}"),
    }
}

#[test]
fn minimal_config_fills_defaults() {
    let c = parse(MINIMAL).unwrap();
    assert_eq!(c.comms, CommsSetting::Local);
    assert_eq!(c.seed, 0);
    assert!(c.abort_on_exception);
    assert!(c.resources.is_none() && c.history_path.is_none());
    assert!(!c.alloc.async_mode);
}

#[test]
fn config_errors_name_the_field() {
    let cases = [
        ("lb = [0.0]\nub = [1.0]", "lb = [0.0]\nub = [1.0, 2.0]", "gen.user.ub"),
        ("function = \"persistent_uniform\"", "function = \"persistent_unifrom\"", "gen.function"),
        ("nworkers = 2", "nworkers = 0", "nworkers"),
        ("version = 1", "version = 2", "version"),
        ("sim_max = 10", "", "exit"),
        ("function = \"only_persistent_gens\"", "function = \"give_sim_work_first\"", "alloc.function"),
        ("gen_batch_size = 5", "gen_batch_size = 0", "gen.user.gen_batch_size"),
        ("function = \"norm\"", "function = \"norm\"\ninputs = [\"y\"]", "sim.inputs"),
    ];
    for (from, to, field) in cases {
        let text = MINIMAL.replacen(from, to, 1);
        assert_eq!(field_of(parse(&text).unwrap_err()), field, "{to}");
    }
}

#[test]
fn unknown_generator_lists_the_registry() {
    let e = parse(&MINIMAL.replace("persistent_uniform", "sobol")).unwrap_err().to_string();
    for name in ["persistent_uniform", "persistent_gpu_counts", "gp_online", "uniform_sample"] {
        assert!(e.contains(name), "{e}");
    }
}

#[test]
fn unknown_top_level_key_is_a_parse_error() {
    let e = parse(&format!("workers = 3\n{MINIMAL}")).unwrap_err();
    assert!(matches!(&e, AppError::Parse(m) if m.contains("workers")), "{e}");
}

#[test]
fn persistent_worker_gen_needs_two_workers() {
    let one = MINIMAL.replace("nworkers = 2", "nworkers = 1");
    assert_eq!(field_of(parse(&one).unwrap_err()), "nworkers");
    let on_manager = one.replace("nworkers = 1", "nworkers = 1\ncomms = \"gen_on_manager\"");
    parse(&on_manager).unwrap();
}

#[test]
fn shipped_configs_validate() {
    let mut n = 0;
    for entry in std::fs::read_dir(configs()).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "toml") {
            load_config(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            n += 1;
        }
    }
    assert!(n >= 8);
}

#[test]
fn gpu_counts_follow_x0_and_fit_the_node() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = load_config(&configs().join("gpu_counts.toml")).unwrap();
    let r = execute(&cfg, dir.path(), None).unwrap();
    assert_eq!(r.flag, CompletionFlag::SimMax);
    let h = history::load(&r.history_path).unwrap();
    assert_eq!(h.returned_count(), 40);
    let mut seen = [false; 5];
    for rec in h.records() {
        assert_eq!(rec.num_gpus, gpu_count(rec.x[0], 0.0, 8.0, 4));
        seen[rec.num_gpus as usize] = true;
    }
    assert_eq!(seen, [false, true, true, true, true]);
}

fn stub_executor() -> Arc<Executor> {
    let platform = detect_platform(&HashMap::new(), &PlatformOverrides::default(), None).unwrap();
    let mut exe = Executor::new(platform).with_launcher(Launcher::Direct);
    exe.register_app(STUB, STUB_APP).unwrap();
    Arc::new(exe)
}

fn single_point_gen(x0: f64) -> GenFn {
    let sent = std::sync::atomic::AtomicBool::new(false);
    GenFn::one_shot(move |_h, _rng| {
        Ok(if sent.swap(true, std::sync::atomic::Ordering::SeqCst) {
            vec![]
        } else {
            vec![NewPoint::new(vec![x0])]
        })
    })
}

fn stub_run(x0: f64, p: StubParams, dir: &Path) -> dynens::History {
    let mut cfg = EnsembleConfig::new(1, 1, ExitCriteria::sim_max(1));
    cfg.executor = Some(stub_executor());
    cfg.ensemble_dir = Some(dir.to_path_buf());
    let (h, flag) =
        run_ensemble(cfg, single_point_gen(x0), sim_stub_app(p), Box::new(GiveSimWorkFirst), None)
            .unwrap();
    assert_eq!(flag, CompletionFlag::SimMax);
    h
}

fn params(sleep: f64, timeout: Option<f64>) -> StubParams {
    StubParams {
        steps: 10,
        sleep,
        timeout: timeout.map(Duration::from_secs_f64),
        poll_interval: Duration::from_millis(50),
        dry_run: false,
    }
}

#[test]
fn stub_with_100_particles_gives_finite_energy() {
    let dir = tempfile::tempdir().unwrap();
    let h = stub_run(100.0, params(0.0, None), dir.path());
    let r = &h.records()[0];
    assert!(r.returned && r.f.is_finite() && !r.kill_sent);
    let stat = dir.path().join("worker1/sim0/forces.stat");
    let text = std::fs::read_to_string(stat).unwrap();
    assert_eq!(text.lines().count(), 10);
    let last: f64 = text.split_whitespace().last().unwrap().parse().unwrap();
    assert_eq!(r.f, last);
}

#[test]
fn stub_past_its_timeout_comes_back_nan() {
    let dir = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let h = stub_run(20.0, params(10.0, Some(0.5)), dir.path());
    assert!(t.elapsed() < Duration::from_secs(5), "{:?}", t.elapsed());
    let r = &h.records()[0];
    assert!(r.returned && r.f.is_nan() && r.kill_sent);
}

#[test]
fn missing_stat_file_is_nan() {
    // `true` exits 0 and writes nothing
    let dir = tempfile::tempdir().unwrap();
    let platform = detect_platform(&HashMap::new(), &PlatformOverrides::default(), None).unwrap();
    let mut exe = Executor::new(platform).with_launcher(Launcher::Direct);
    exe.register_app("/bin/true", STUB_APP).unwrap();
    let mut cfg = EnsembleConfig::new(1, 1, ExitCriteria::sim_max(1));
    cfg.executor = Some(Arc::new(exe));
    cfg.ensemble_dir = Some(dir.path().to_path_buf());
    let (h, _) = run_ensemble(
        cfg,
        single_point_gen(5.0),
        sim_stub_app(params(0.0, None)),
        Box::new(GiveSimWorkFirst),
        None,
    )
    .unwrap();
    let r = &h.records()[0];
    assert!(r.returned && r.f.is_nan() && !r.kill_sent);
}

#[test]
fn restart_through_config_matches_one_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_text = |n: usize| {
        std::fs::read_to_string(configs().join("uniform_norm.toml"))
            .unwrap()
            .replace("sim_max = 500", &format!("sim_max = {n}"))
            .replace("gen_batch_size = 50", "gen_batch_size = 10")
    };
    let full = parse(&cfg_text(200)).unwrap();
    let a = execute(&full, &dir.path().join("a"), None).unwrap();
    let half = parse(&cfg_text(100)).unwrap();
    let b1 = execute(&half, &dir.path().join("b"), None).unwrap();
    let h0 = history::load(&b1.history_path).unwrap();
    let b2 = execute(&full, &dir.path().join("c"), Some(h0)).unwrap();
    let ha = history::load(&a.history_path).unwrap();
    let hb = history::load(&b2.history_path).unwrap();
    assert_eq!(ha.returned_count(), 200);
    assert!(ha.same_outcome(&hb));
}

#[test]
fn prepare_builds_frontier_pool_from_inventory() {
    let mut cfg = load_config(&configs().join("frontier_dry_run.toml")).unwrap();
    cfg.sim.user.insert("app_path".into(), toml::Value::String(STUB.into()));
    let p = prepare(&cfg, Path::new("unused"), &HashMap::new()).unwrap();
    let platform = p.platform.unwrap();
    assert_eq!((platform.cores_per_node, platform.gpus_per_node), (64, 8));
    let pool = &p.ensemble.resources.as_ref().unwrap().pool;
    // one simulation worker: the other hosts the generator
    assert_eq!(pool.rsets().len(), 1);
    assert!(p.ensemble.executor.is_some());
}

fn dynens(args: &[&str], cwd: &Path) -> Output {
    Command::new(DYNENS)
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "error")
        .env_remove("DYNENS_PLATFORM")
        .output()
        .unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

#[test]
fn frontier_dry_run_prints_golden_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("frontier_dry_run.toml");
    let out = dynens(&["run", cfg.to_str().unwrap(), "--dry-run", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    let lines: Vec<&str> = stdout.lines().filter(|l| l.starts_with("[sim ")).collect();
    assert_eq!(lines.len(), 2, "{stdout}");
    let stub = Path::new(DYNENS).with_file_name("forces_stub");
    let golden = format!(
        "srun -n 8 --nodes 1 --ntasks-per-node 8 --gpus-per-node 8 {}",
        stub.display()
    );
    for l in lines {
        let (_, cmd) = l.split_once("] ").unwrap();
        assert!(cmd.starts_with(&golden), "{cmd}");
    }
    // nothing ran, so nothing was written
    assert!(!dir.path().join("o/ensemble/worker1/sim0/forces.stat").exists());
}

#[test]
fn dry_run_needs_stub_app() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("uniform_norm.toml");
    let out = dynens(&["run", cfg.to_str().unwrap(), "--dry-run"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("sim.function"));
}

#[test]
fn validate_broken_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    std::fs::write(&p, MINIMAL.replace("ub = [1.0]", "ub = [1.0, 1.0]")).unwrap();
    let out = dynens(&["validate", p.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("gen.user.ub"), "{}", text(&out.stderr));
    std::fs::write(&p, MINIMAL).unwrap();
    assert_eq!(dynens(&["validate", p.to_str().unwrap()], dir.path()).status.code(), Some(0));
}

#[test]
fn sim_max_500_config_through_cli() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("uniform_norm.toml");
    let out = dynens(&["run", cfg.to_str().unwrap(), "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let h = history::load(dir.path().join("o/history.json")).unwrap();
    assert_eq!(h.returned_count(), 500);
    assert!(h.records().iter().all(|r| r.x[0].abs() <= 3.0 && r.x[1].abs() <= 2.0));
    assert!(text(&out.stdout).contains("completed: SimMax"));

    let replay = dynens(&["replay-metrics", "o/history.json"], dir.path());
    assert_eq!(replay.status.code(), Some(0));
    assert!(text(&replay.stdout).contains("500 returned"), "{}", text(&replay.stdout));
}

#[test]
fn smoke_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("uniform_norm", 500),
        ("uniform_stub", 8),
        ("gp_norm", 24),
        ("gp_stub", 8),
    ];
    for (name, returned) in cases {
        for comms in ["local", "gen-on-manager"] {
            let cfg = configs().join(format!("{name}.toml"));
            let out_dir = format!("{name}-{comms}");
            let out = dynens(
                &["run", cfg.to_str().unwrap(), "--comms", comms, "--out", &out_dir],
                dir.path(),
            );
            assert_eq!(out.status.code(), Some(0), "{name} {comms}: {}", text(&out.stderr));
            let h = history::load(dir.path().join(&out_dir).join("history.json")).unwrap();
            assert_eq!(h.returned_count(), returned, "{name} {comms}");
            assert!(h.records().iter().all(|r| r.f.is_finite()), "{name} {comms}");
            if name.starts_with("gp") {
                let metrics = dir.path().join(&out_dir).join("metrics.csv");
                let rows = dynens::gp_generator::read_metrics(&metrics).unwrap();
                assert_eq!(rows.len(), if name == "gp_norm" { 3 } else { 2 });
                assert_eq!(rows.last().unwrap().n_train, returned);
                let replay = dynens(
                    &["replay-metrics", &format!("{out_dir}/history.json"), "--metrics", metrics.to_str().unwrap()],
                    dir.path(),
                );
                assert_eq!(replay.status.code(), Some(0));
                assert!(text(&replay.stdout).contains("iterations"));
            }
        }
    }
}
