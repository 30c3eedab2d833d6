//! Acceptance suite: one PASS/FAIL line per criterion. Runs as a plain binary
//! so the report reads top to bottom; exits non-zero if any criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use vsplit_cli::{cmd_split, SplitArgs};
use vsplit_core::dom::Attributes;
use vsplit_core::mapping::{classify_element, ElementClass};
use vsplit_core::sync_hub::{random_document, simulate, Scenario, SimulationReport};

type Outcome = Result<String, String>;

fn run(name: &str, budget: Option<Duration>, check: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
        let msg = panic
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into());
        Err(msg)
    });
    let elapsed = start.elapsed();
    let outcome = match (outcome, budget) {
        (Ok(_), Some(limit)) if elapsed > limit => Err(format!("took {elapsed:.2?}, budget {limit:?}")),
        (o, _) => o,
    };
    match &outcome {
        Ok(detail) => println!("PASS {name}: {detail} ({elapsed:.2?})"),
        Err(why) => println!("FAIL {name}: {why} ({elapsed:.2?})"),
    }
    outcome.is_ok()
}

// ---------------------------------------------------------------------------
// Classification

/// The element classes as the source lists them, written out independently
/// of the library's tables.
const INTERACTIVE: &[&str] = &[
    "a", "area", "button", "datalist", "form", "input", "keygen", "textarea", "nav", "optgroup", "option", "output",
    "select",
];
const MULTIMEDIA: &[&str] = &["video", "audio", "source", "track"];
const VISUAL: &[&str] = &[
    "caption", "dialog", "figcaption", "h1", "h2", "h3", "h4", "h5", "h6", "hgroup", "img", "kbd", "label", "legend",
    "object", "p", "progress",
];
const COMPOSITE: &[&str] = &["div", "table", "iframe"];
const OFF_LIST: &[&str] = &[
    "span", "section", "article", "header", "footer", "main", "aside", "ul", "ol", "li", "strong", "em", "script",
    "style", "canvas", "svg", "pre", "code", "blockquote", "figure",
];

fn classification() -> Outcome {
    let plain = Attributes::new();
    let mut listener = Attributes::new();
    listener.set("onclick", "f()");
    let mut expected: Vec<(&str, ElementClass)> = Vec::new();
    expected.extend(INTERACTIVE.iter().map(|t| (*t, ElementClass::Interactive)));
    expected.extend(MULTIMEDIA.iter().map(|t| (*t, ElementClass::Multimedia)));
    expected.extend(VISUAL.iter().map(|t| (*t, ElementClass::Visual)));
    expected.extend(COMPOSITE.iter().map(|t| (*t, ElementClass::Composite)));
    let listed = expected.len();
    expected.extend(OFF_LIST.iter().map(|t| (*t, ElementClass::Other)));
    let mut checked = 0;
    for (tag, class) in &expected {
        let got = classify_element(tag, &plain);
        if got != *class {
            return Err(format!("{tag}: got {got}, want {class}"));
        }
        // A declarative listener makes anything but a composite interactive.
        let want = if *class == ElementClass::Composite { ElementClass::Composite } else { ElementClass::Interactive };
        let got = classify_element(tag, &listener);
        if got != want {
            return Err(format!("{tag}[onclick]: got {got}, want {want}"));
        }
        checked += 2;
    }
    Ok(format!("{listed} listed + {} off-list tags, {checked} cases (the source lists {listed} distinct names)", OFF_LIST.len()))
}

// ---------------------------------------------------------------------------
// Fixture reproductions

fn youtube_split() -> Outcome {
    let (annotated, result) = youtube();
    check_expected_ids(&annotated, &result, YOUTUBE_DEVICE2, YOUTUBE_DEVICE1, YOUTUBE_BOTH)?;
    Ok(format!(
        "{} moved, {} kept, {} shared",
        YOUTUBE_DEVICE2.len(),
        YOUTUBE_DEVICE1.len(),
        YOUTUBE_BOTH.len()
    ))
}

fn region_split() -> Outcome {
    let (annotated, result) = semantic_video();
    check_expected_ids(&annotated, &result, VIDEO_DEVICE2, VIDEO_DEVICE1, VIDEO_BOTH)?;
    Ok(format!("{} moved, {} kept, {} shared", VIDEO_DEVICE2.len(), VIDEO_DEVICE1.len(), VIDEO_BOTH.len()))
}

const QUERIES: &[&str] = &[
    r#"{"op":"leaf","criterion":{"kind":"semantic","classes":["interactive"]}}"#,
    r#"{"op":"leaf","criterion":{"kind":"semantic","classes":["multimedia"]}}"#,
    r#"{"op":"leaf","criterion":{"kind":"semantic","classes":["visual"]}}"#,
    r#"{"op":"leaf","criterion":{"kind":"semantic","classes":["multimedia","interactive"]}}"#,
    r#"{"op":"not","children":[{"op":"leaf","criterion":{"kind":"semantic","classes":["multimedia"]}}]}"#,
];

fn coverage() -> Outcome {
    let mut checked = 0;
    for (fixture, base) in [("youtube-like.html", YOUTUBE_BASE), ("semantic-video.html", VIDEO_BASE)] {
        let doc = load(fixture, Some(base));
        for q in QUERIES {
            let (annotated, result) = pipeline(&doc, q, None);
            check_coverage(&annotated, &result).map_err(|e| format!("{fixture} {q}: {e}"))?;
            checked += 1;
        }
    }
    let (annotated, result) = semantic_video();
    check_coverage(&annotated, &result).map_err(|e| format!("semantic-video.html region: {e}"))?;
    Ok(format!("{} fixture/query pairs", checked + 1))
}

fn determinism() -> Outcome {
    let dir = fixture_dir();
    let mut cases = vec![];
    let mut youtube = SplitArgs::new(dir.join("youtube-like.html"), dir.join("interactive.query.json"));
    youtube.base_url = Some(YOUTUBE_BASE.into());
    cases.push(youtube);
    let mut video = SplitArgs::new(dir.join("semantic-video.html"), dir.join("semantic-video.query.json"));
    video.geometry = Some(dir.join("semantic-video.geometry.json"));
    video.base_url = Some(VIDEO_BASE.into());
    cases.push(video);
    for args in &mut cases {
        args.session_id = Some("acceptance".into());
        let a = tempfile::tempdir().map_err(|e| e.to_string())?;
        let b = tempfile::tempdir().map_err(|e| e.to_string())?;
        cmd_split(args, a.path()).map_err(|e| e.to_string())?;
        cmd_split(args, b.path()).map_err(|e| e.to_string())?;
        for f in ["master.html", "slave.html", "manifest.json"] {
            let x = std::fs::read(a.path().join(f)).map_err(|e| e.to_string())?;
            let y = std::fs::read(b.path().join(f)).map_err(|e| e.to_string())?;
            if x != y {
                return Err(format!("{} {f} differs between runs", args.input.display()));
            }
        }
    }
    Ok(format!("{} fixtures × 3 files", cases.len()))
}

// ---------------------------------------------------------------------------
// Annotation properties

fn annotation_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xacce);
    let mut nodes = 0;
    for round in 0..200 {
        let doc = random_document(&mut rng, 500);
        nodes += doc.len();
        let lists = random_lists(&doc, &mut rng);
        let violations = annotation_violations(&doc, &lists);
        if !violations.is_empty() {
            return Err(format!("tree {round}: {} violations, first {}", violations.len(), violations[0]));
        }
    }
    Ok(format!("200 trees, {nodes} nodes, zero violations"))
}

// ---------------------------------------------------------------------------
// Simulation

fn scenario(seed: u64, count: usize, batches: usize, faults: serde_json::Value) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (fixture, base) = if seed.is_multiple_of(2) {
        ("youtube-like.html", YOUTUBE_BASE)
    } else {
        ("semantic-video.html", VIDEO_BASE)
    };
    let query: serde_json::Value = serde_json::from_str(QUERIES[rng.gen_range(0..QUERIES.len())]).unwrap();
    let mut events = vec![
        json!({"at": 0, "type": "connect", "role": "master"}),
        json!({"at": 0, "type": "connect", "role": "slave"}),
    ];
    let mut left = count;
    for b in 0..batches {
        let n = if b + 1 == batches { left } else { left / (batches - b) };
        left -= n;
        events.push(json!({"at": b + 1, "type": "random_mutations", "count": n}));
    }
    let value = json!({
        "name": format!("seed-{seed}"),
        "seed": seed,
        "document": {"html": fixture_text(fixture)},
        "base_url": base,
        "query": query,
        "events": events,
        "faults": faults,
    });
    Scenario::from_json(&value.to_string()).unwrap()
}

/// Convergence as judged by the independent oracle, not the simulator.
fn oracle_converged(r: &SimulationReport) -> Result<(), String> {
    if slave_body(&r.slave) != expected_slave_body(&r.master) {
        return Err(format!("{}: slave differs from the master's projection", r.name));
    }
    if !r.converged {
        return Err(format!("{}: simulator reports divergence: {:?}", r.name, r.failures));
    }
    Ok(())
}

fn convergence_fuzz() -> Outcome {
    let mut mutations = 0;
    let mut messages = 0;
    for seed in 0..100u64 {
        let count = ChaCha8Rng::seed_from_u64(seed ^ 0xf022).gen_range(1..=500);
        let s = scenario(seed, count, 5, json!([]));
        let r = simulate(&s).map_err(|e| format!("seed {seed}: {e}"))?;
        oracle_converged(&r)?;
        mutations += count;
        messages += r.transcript.len();
    }
    Ok(format!("100/100 converged, {mutations} mutations, {messages} messages"))
}

fn fault_recovery() -> Outcome {
    let mut resyncs = 0;
    for seed in 0..50u64 {
        let kind = if seed % 2 == 0 { "drop" } else { "duplicate" };
        let s = scenario(1000 + seed, 60, 3, json!([{"type": kind}]));
        let r = simulate(&s).map_err(|e| format!("seed {seed}: {e}"))?;
        if r.faults.len() != 1 {
            return Err(format!("seed {seed}: {} faults injected", r.faults.len()));
        }
        oracle_converged(&r)?;
        // The initial connection costs one resync; a drop needs another.
        if kind == "drop" && r.resyncs < 2 {
            return Err(format!("seed {seed}: drop recovered without a resync"));
        }
        resyncs += r.resyncs;
    }
    Ok(format!("50/50 converged (25 drops, 25 duplicates), {resyncs} resyncs"))
}

fn main() -> ExitCode {
    let results = [
        run("classification table", Some(Duration::from_secs(1)), classification),
        run("youtube-like semantic split", None, youtube_split),
        run("semantic-video region split", None, region_split),
        run("annotation properties", Some(Duration::from_secs(10)), annotation_properties),
        run("mirroring convergence fuzz", Some(Duration::from_secs(60)), convergence_fuzz),
        run("fault recovery", None, fault_recovery),
        run("split coverage invariant", None, coverage),
        run("split determinism", None, determinism),
    ];
    let failed = results.iter().filter(|ok| !**ok).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
