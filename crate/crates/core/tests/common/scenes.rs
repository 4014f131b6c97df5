//! Two synthetic scenes with a questions file and canned endpoint answers.

use std::path::PathBuf;

use scene2prompt::pipeline::QuestionRecord;
use scene2prompt::synthetic::{synthetic_scene, write_scene_dir, SyntheticSpec};

use super::mock::Reply;

pub const SCENE_IDS: [&str; 2] = ["scene0000_00", "scene0001_00"];

/// A question, its references, and what the mock endpoint will answer.
#[derive(Debug, Clone)]
pub struct Planted {
    pub question_id: &'static str,
    pub scene_id: &'static str,
    pub question: &'static str,
    pub references: &'static [&'static str],
    pub reply: &'static str,
}

pub const PLANTED: [Planted; 6] = [
    Planted { question_id: "q0", scene_id: "scene0000_00", question: "What color is the chair?", references: &["brown"], reply: "Brown." },
    Planted { question_id: "q1", scene_id: "scene0000_00", question: "Is the lamp on my left?", references: &["yes"], reply: "no" },
    Planted { question_id: "q2", scene_id: "scene0000_00", question: "How many chairs are there?", references: &["two", "2"], reply: "2" },
    Planted { question_id: "q3", scene_id: "scene0001_00", question: "Which side is the door on?", references: &["left"], reply: "the left" },
    Planted { question_id: "q4", scene_id: "scene0001_00", question: "Can I sit on the bed?", references: &["yes"], reply: "Yes" },
    Planted { question_id: "q5", scene_id: "scene0001_00", question: "Where is the window?", references: &["behind me"], reply: "in front" },
];

pub fn small_spec() -> SyntheticSpec {
    SyntheticSpec { objects: 6, points_per_object: 40, floor_points: 150, duplicates: 3, room: (5.0, 4.0) }
}

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub scenes: PathBuf,
    pub questions: PathBuf,
}

impl Fixture {
    pub fn output(&self) -> PathBuf {
        self.dir.path().join("out")
    }
}

pub fn two_scene_fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    for (i, id) in SCENE_IDS.iter().enumerate() {
        write_scene_dir(&scenes, &synthetic_scene(id, 10 + i as u64, &small_spec())).unwrap();
    }
    let mut text = String::new();
    for p in &PLANTED {
        let q = QuestionRecord {
            question_id: p.question_id.into(),
            scene_id: p.scene_id.into(),
            question: p.question.into(),
            answers: p.references.iter().map(|s| s.to_string()).collect(),
            situation: None,
        };
        text.push_str(&serde_json::to_string(&q).unwrap());
        text.push('\n');
    }
    let questions = dir.path().join("questions.jsonl");
    std::fs::write(&questions, text).unwrap();
    Fixture { dir, scenes, questions }
}

/// Answer each request with the planted reply for the question it contains.
pub fn planted_responder() -> impl Fn(usize, &[u8]) -> Reply + Send + Sync + 'static {
    |_, body| {
        let text = String::from_utf8_lossy(body);
        match PLANTED.iter().find(|p| text.contains(&format!("Question: {}", p.question))) {
            Some(p) => Reply::answer(p.reply),
            None => Reply::status(400),
        }
    }
}
