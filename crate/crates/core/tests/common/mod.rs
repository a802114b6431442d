//! Fixtures shared by the integration suites: the Blizzard long-form
//! decomposition script and a deterministic labeled mock dataset.
#![allow(dead_code)]

use traceuq::backend::{collect_trace, MockBackend, ScriptRule};
use traceuq::trace::{LabeledDataset, Query, SamplingParams};

pub const BLIZZARD_QUESTION: &str = "What is the gaming company \"Blizzard Entertainment\"?";

pub const BLIZZARD_ANSWER: &str = "Blizzard Entertainment is an American video game developer and publisher known for creating some of the most popular and influential games in the industry. Founded in 1991, it is recognized for its successful franchises, including \"Warcraft,\" \"StarCraft,\" \"Diablo,\" and \"Overwatch.\" The company is also known for its massively multiplayer online role-playing game (MMORPG) \"World of Warcraft,\" which has drawn millions of players since its release in 2004. Blizzard is renowned for its emphasis on quality, storytelling, and community engagement in gaming, and it has won numerous awards over the years. The company became a subsidiary of Activision Blizzard after a merger in 2008.";

pub const BLIZZARD_CLAIMS: [&str; 17] = [
    "Blizzard Entertainment is an American video game developer.",
    "Blizzard Entertainment is an American video game publisher.",
    "Blizzard Entertainment is known for creating some of the most popular games in the video game industry.",
    "Blizzard Entertainment is known for creating some of the most influential games in the video game industry.",
    "Blizzard Entertainment was founded in 1991.",
    "Blizzard Entertainment is recognized for its successful franchises.",
    "Blizzard Entertainment has successful franchises including \"Warcraft.\"",
    "Blizzard Entertainment has successful franchises including \"StarCraft.\"",
    "Blizzard Entertainment has successful franchises including \"Diablo.\"",
    "Blizzard Entertainment has successful franchises including \"Overwatch.\"",
    "Blizzard Entertainment is known for its massively multiplayer online role-playing game \"World of Warcraft.\"",
    "\"World of Warcraft\" has drawn millions of players since its release in 2004.",
    "Blizzard Entertainment is renowned for its emphasis on quality in gaming.",
    "Blizzard Entertainment is renowned for its storytelling in gaming.",
    "Blizzard Entertainment is renowned for its community engagement in gaming.",
    "Blizzard Entertainment has won numerous awards over the years.",
    "Blizzard Entertainment became a subsidiary of Activision Blizzard after a merger in 2008.",
];

pub fn python_list(items: &[&str]) -> String {
    let quoted: Vec<String> = items.iter().map(|c| format!("`{c}'")).collect();
    format!("[{}]", quoted.join(",\n "))
}

/// Scripts the two decomposition rounds: the whole answer maps to five
/// sentences, each sentence to its final claims. The step-1 rule keys
/// on the full answer so the per-sentence rules cannot shadow it.
pub fn blizzard_backend() -> MockBackend {
    let sentences = [
        (
            "Blizzard Entertainment is an American video game developer and publisher known for creating some of the most popular and influential games in the industry.",
            &BLIZZARD_CLAIMS[0..4],
        ),
        (
            "Founded in 1991, it is recognized for its successful franchises, including \"Warcraft,\" \"StarCraft,\" \"Diablo,\" and \"Overwatch.\"",
            &BLIZZARD_CLAIMS[4..10],
        ),
        (
            "The company is also known for its massively multiplayer online role-playing game (MMORPG) \"World of Warcraft,\" which has drawn millions of players since its release in 2004.",
            &BLIZZARD_CLAIMS[10..12],
        ),
        (
            "Blizzard is renowned for its emphasis on quality, storytelling, and community engagement in gaming, and it has won numerous awards over the years.",
            &BLIZZARD_CLAIMS[12..16],
        ),
        (
            "The company became a subsidiary of Activision Blizzard after a merger in 2008.",
            &BLIZZARD_CLAIMS[16..17],
        ),
    ];
    let step1 = python_list(&sentences.iter().map(|s| s.0).collect::<Vec<_>>());
    let mut backend =
        MockBackend::new(7).with_script(ScriptRule::new(BLIZZARD_ANSWER, &[step1.as_str()]));
    for (sentence, claims) in sentences {
        let reply = python_list(claims);
        backend = backend.with_script(ScriptRule::new(sentence, &[reply.as_str()]));
    }
    backend
}

/// n queries run through the mock backend, labels alternating 0, 1, ...
pub fn mock_dataset(seed: u64, n: usize, num_samples: usize) -> LabeledDataset {
    let backend = MockBackend::new(seed);
    let sampling = SamplingParams {
        temperature: 1.0,
        num_samples,
    };
    let mut dataset = LabeledDataset::default();
    for i in 0..n {
        let query = Query {
            id: format!("q{i}"),
            prompt: format!("What is item number {i}?"),
            ground_truths: vec![format!("truth {i}")],
            dataset_tag: "fixture".into(),
            transform_tag: None,
        };
        let trace = collect_trace(&backend, &query, &sampling, false, false).unwrap();
        dataset.entries.push((trace, (i % 2) as u8));
    }
    dataset
}
