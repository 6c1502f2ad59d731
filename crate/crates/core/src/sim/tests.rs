use super::*;
use crate::verdict::Reason;

fn five_senders() -> Scenario {
    Scenario::new(5, &[(0, 36), (1, 11), (2, 28), (3, 17), (4, 38)])
}

fn with_strategy(strategy: Strategy, seed: u64) -> Scenario {
    let mut senders = vec![(0, 10), (1, 20), (2, 30)];
    if strategy.needs_message() {
        senders.push((3, 15));
    }
    Scenario::new(6, &senders).with_adversary(3, strategy).with_seed(seed)
}

#[test]
fn five_sender_scenario_runs_clean() {
    let out = run_scenario(&five_senders()).unwrap();
    assert_eq!(out.delivered_payloads(), vec![11, 17, 28, 36, 38]);
    assert_eq!(out.transmitted_rounds(), 5);
    assert!(out.summary.verdicts.is_empty());
    assert_eq!(out.summary.status, RunStatus::Complete);
    assert_eq!(out.trees[0].transmitted_rounds(), &[1, 2, 4, 6, 14]);
    let report = verify_transcript(&out.transcript.to_text()).unwrap();
    assert!(report.is_clean(), "{:?}", report.divergences);
}

#[test]
fn silent_run_is_one_round() {
    let out = run_scenario(&Scenario::new(2, &[])).unwrap();
    assert_eq!(out.transmitted_rounds(), 1);
    assert!(out.summary.delivered.is_empty());
    let Record::Round(r) = &out.transcript.records()[1] else { panic!() };
    assert!(r.outcome.valid);
    assert!(r.outcome.sum.is_zero());
}

#[test]
fn runs_are_deterministic() {
    let s = with_strategy(Strategy::WrongBranch, 5);
    let a = run_scenario(&s).unwrap().transcript.to_text();
    let b = run_scenario(&s).unwrap().transcript.to_text();
    assert_eq!(a, b);
    let c = run_scenario(&s.clone().with_seed(6)).unwrap().transcript.to_text();
    assert_ne!(a, c);
}

#[test]
fn every_strategy_is_caught_without_collateral() {
    for strategy in Strategy::ALL {
        for seed in 0..4 {
            let s = with_strategy(strategy, seed);
            let out = run_scenario(&s).unwrap();
            let flagged = out.verdict_participants();
            if strategy == Strategy::RefuseSignature {
                assert!(flagged.is_empty(), "{strategy:?}");
                let Record::Header(h) = &out.transcript.records()[0] else { panic!() };
                assert!(h.key_graph.is_opted_out(3, 4));
            } else {
                assert_eq!(flagged, vec![3], "{strategy:?} seed {seed}");
            }
            assert!(out.undelivered.is_empty(), "{strategy:?} seed {seed}: {:?}", out.undelivered);
            let mut honest = out.delivered_payloads();
            honest.retain(|p| [10, 20, 30].contains(p));
            honest.sort();
            assert_eq!(honest, vec![10, 20, 30], "{strategy:?} seed {seed}");
            let report = verify_transcript(&out.transcript.to_text()).unwrap();
            assert!(report.is_clean(), "{strategy:?}: {:?}", report.divergences);
        }
    }
}

#[test]
fn bad_pad_is_found_by_investigation() {
    let out = run_scenario(&Scenario::new(5, &[(0, 9)]).with_adversary(2, Strategy::BadPad)).unwrap();
    let records = out.transcript.records();
    let Record::Round(first) = &records[1] else { panic!() };
    assert!(!first.outcome.valid);
    let Record::Investigation(inv) = &records[2] else { panic!() };
    assert_eq!(inv.outcome.verdicts.len(), 1);
    assert_eq!(inv.outcome.verdicts[0].participant, 2);
    assert_eq!(inv.outcome.verdicts[0].reason, Reason::AggregateMismatch);
}

#[test]
fn mutations_are_detected() {
    let out = run_scenario(&with_strategy(Strategy::MutateMessage, 1)).unwrap();
    let lines = out.transcript.lines().to_vec();
    // change one O
    let idx = lines.iter().position(|l| l.contains("\"record\":\"round\"")).unwrap();
    let mut rec: Record = serde_json::from_str(&lines[idx]).unwrap();
    if let Record::Round(r) = &mut rec {
        let gp = crate::group::GroupParams::derive(crate::group::SecurityLevel::Test, DOMAIN_TAG).unwrap();
        r.ciphertexts[0].o = gp.add(&r.ciphertexts[0].o, &gp.scalar(1));
    }
    let mut mutated = lines.clone();
    mutated[idx] = serde_json::to_string(&rec).unwrap();
    let report = verify_transcript(&(mutated.join("\n") + "\n")).unwrap();
    assert!(report.divergences.iter().any(|d| d.index == idx));

    // drop a verdict
    let idx = lines.iter().position(|l| l.contains("\"proof_failed\"")).unwrap();
    let mut rec: Record = serde_json::from_str(&lines[idx]).unwrap();
    if let Record::Round(r) = &mut rec {
        r.outcome.verdicts.clear();
    }
    let mut mutated = lines.clone();
    mutated[idx] = serde_json::to_string(&rec).unwrap();
    let report = verify_transcript(&(mutated.join("\n") + "\n")).unwrap();
    assert!(report.divergences.iter().any(|d| d.index == idx && d.detail.contains("verdicts")));

    // swap in another participant's signature
    let idx = lines.iter().position(|l| l.contains("\"record\":\"round\"")).unwrap();
    let mut rec: Record = serde_json::from_str(&lines[idx]).unwrap();
    if let Record::Round(r) = &mut rec {
        r.ciphertexts[0].signature = r.ciphertexts[1].signature.clone();
    }
    let mut mutated = lines.clone();
    mutated[idx] = serde_json::to_string(&rec).unwrap();
    let report = verify_transcript(&(mutated.join("\n") + "\n")).unwrap();
    assert!(report.divergences.iter().any(|d| d.index == idx && d.detail.contains("signature")));

    // truncation
    let text = out.transcript.to_text();
    assert!(verify_transcript(&text[..text.len() - 10]).is_err());
}

#[test]
fn resolve_double_branch_among_three() {
    let r = crate::splitter::resolve(5, &[(0, 40), (1, 7), (2, 19), (4, 25)], &[(4, Strategy::DoubleBranch)], 3)
        .unwrap();
    for m in [7, 19, 40] {
        assert_eq!(r.messages.iter().filter(|&&x| x == m).count(), 1);
    }
    assert_eq!(r.verdicts.iter().map(|v| v.participant).collect::<Vec<_>>(), vec![4]);
}
