// temporary diagnosis, not committed
use stateguard::corpus::{synth, build_corpus, CorpusConfig, PositionPolicy};
use stateguard::model::toy;

#[test]
fn position_dependence() {
    env_logger::Builder::new().filter_level(log::LevelFilter::Warn).init();
    let cache = std::env::temp_dir().join("sg-pilot-cache2");
    let model = toy::toy_instruct_model(Some(&cache)).unwrap();
    let docs = synth::synthetic_documents(300, 101, synth::SynthProfile::Eval);
    let instructions = synth::builtin_instructions(synth::InstructionPool::Eval);

    for policy in [PositionPolicy::Beginning, PositionPolicy::Middle, PositionPolicy::End, PositionPolicy::Random] {
        let cc = CorpusConfig { train: 0, validation: 0, test: 100, test_policy: policy, seed: 7, ..Default::default() };
        let split = build_corpus(&docs, &instructions, &cc).unwrap();
        let mut pos_correct = 0; let mut pos_total = 0;
        let mut neg_correct = 0; let mut neg_total = 0;
        for s in &split.test {
            let ls = toy::mean_response_loss(&model, &[s.text.clone()], "Sure.", 256);
            let ln = toy::mean_response_loss(&model, &[s.text.clone()], "Noted.", 256);
            let pred = if ls < ln { 1 } else { 0 };
            if s.label == 1 { pos_total += 1; if pred == 1 { pos_correct += 1; } }
            else { neg_total += 1; if pred == 0 { neg_correct += 1; } }
        }
        eprintln!("policy {policy:<9}: injected recall {pos_correct}/{pos_total}  clean recall {neg_correct}/{neg_total}");
    }

    // Bare instructions (no document) vs bare clean docs
    let mut bare_ok = 0;
    for i in instructions.iter().take(60) {
        let ls = toy::mean_response_loss(&model, &[i.text.clone()], "Sure.", 256);
        let ln = toy::mean_response_loss(&model, &[i.text.clone()], "Noted.", 256);
        if ls < ln { bare_ok += 1; }
    }
    eprintln!("bare eval instructions recognized: {bare_ok}/60");
}
