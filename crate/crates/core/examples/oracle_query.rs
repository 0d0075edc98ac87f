//! Ask the offline rule oracle about a few traffic contexts and show how
//! answers are cached per bucket of 5 vehicles.
//!
//! cargo run --example oracle_query

use groundsim::oracle::{build_prompt, parse_response, Oracle, PromptContext};
use groundsim::scenario::{DomainContext, RoadType, Weather};

fn main() -> groundsim::Result<()> {
    let oracle = Oracle::rule();
    let snowy = DomainContext::new(Weather::Snowy, RoadType::Normal);
    println!("{}\n", build_prompt(&PromptContext::new(snowy, 7)));

    for weather in [Weather::Sunny, Weather::Rainy, Weather::Snowy] {
        for n in [0, 4, 12] {
            let e = oracle.query(&PromptContext::new(DomainContext::new(weather, RoadType::HeavyIndustry), n))?;
            println!("{:<6} heavy industry n={n:2}: ac {:.2} ad {:.2} aed {:.2} adl {:.2}", weather.as_str(), e.ac, e.ad, e.aed, e.adl);
        }
    }
    // 0 and 4 share a bucket, so only 6 backend calls for 9 queries.
    println!("backend calls: {}, cached keys: {}", oracle.calls(), oracle.cache().len());

    let answer = "Sure! [average acceleration: 0.8 m/s²], [average deceleration: 2.0], \
                  [average emergency deceleration: 3.5], [average startup delay: 1.2 s].";
    println!("parsed free text: {:?}", parse_response(answer)?);
    Ok(())
}
