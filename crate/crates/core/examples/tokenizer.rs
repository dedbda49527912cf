//! Trains a byte-level BPE vocabulary on the synthetic base corpus and
//! round-trips a few sentences through it.

use palign::fixture::base_corpus;
use palign::tokenizer::{train_bpe, Vocabulary};

fn main() -> palign::Result<()> {
    let corpus = base_corpus(300, 1);
    let texts = corpus.iter().flat_map(|p| [p.context.as_str(), p.response.as_str()]);
    let vocab = train_bpe(texts, 400)?;
    println!("vocabulary: {} tokens, {} merges", vocab.size(), vocab.merges().len());
    println!("specials: eos={} pad={} sep={}", vocab.eos(), vocab.pad(), vocab.sep());

    for text in ["how do I reset my password?", "the printer is out of paper."] {
        let ids = vocab.encode(text);
        let pieces: Vec<String> =
            ids.iter().map(|&id| String::from_utf8_lossy(vocab.token_bytes(id).unwrap_or_default()).into_owned()).collect();
        println!("{text:?} -> {} tokens {:?}", ids.len(), pieces);
        assert_eq!(vocab.decode(&ids)?, text);
    }

    let (ids, response_start) = vocab.encode_pair("hi?", "hello.");
    println!("pair encoding: {ids:?}, response starts at {response_start}");

    let reparsed = Vocabulary::parse(&vocab.to_file_string())?;
    assert_eq!(reparsed.encode("password"), vocab.encode("password"));
    println!("vocabulary file round-trips");
    Ok(())
}
