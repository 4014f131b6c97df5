//! Write synthetic scene directories and a questions file for trying the CLI.
//!
//! Usage: `cargo run -p scene2prompt-core --example synthetic_fixture -- <dir> [scene count]`

use std::path::PathBuf;

use scene2prompt::pipeline::QuestionRecord;
use scene2prompt::synthetic::{synthetic_scene, write_scene_dir, SyntheticSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let root = PathBuf::from(args.next().ok_or("usage: synthetic_fixture <dir> [scene count]")?);
    let count: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(2);
    let scenes = root.join("scenes");
    let mut questions = String::new();
    for i in 0..count {
        let id = format!("scene{i:04}_00");
        let scene = synthetic_scene(&id, i, &SyntheticSpec::default());
        write_scene_dir(&scenes, &scene)?;
        let label = &scene.proposals[0].class_label;
        for (k, (q, a)) in [(format!("What is the nearest {label} next to?"), "wall"), ("Is the door open?".to_string(), "no")].into_iter().enumerate() {
            let rec = QuestionRecord { question_id: format!("{id}_q{k}"), scene_id: id.clone(), question: q, answers: vec![a.into()], situation: None };
            questions.push_str(&serde_json::to_string(&rec)?);
            questions.push('\n');
        }
    }
    std::fs::write(root.join("questions.jsonl"), questions)?;
    println!("wrote {count} scene(s) under {} and {}", scenes.display(), root.join("questions.jsonl").display());
    Ok(())
}
