import math

import numpy as np
import pytest
import torch

from avdialog.data import TimeRegion
from avdialog.reasoning import (AttentionTrace, Proposal, RawProposals,
                                ReasoningConfig, RegionProposalNetwork,
                                attention_region, decode_proposals, encode_targets,
                                filter_proposals, load_rpn_checkpoint,
                                localize_attention, pool_qa_embedding,
                                rpn_train_step, save_rpn_checkpoint, train_rpn)
from avdialog.training import make_items

SMALL_CFG = ReasoningConfig(kernel_sizes=(1, 3, 5), rpn_width=8, rpn_depth=2)


class TestAttentionRegion:
    def test_uniform_attention_moment_oracle(self):
        # uniform weights over frames 0..9 at 1 Hz: mu = 4.5, sigma^2 = 8.25
        rows = np.full((3, 10), 0.1)
        trace = AttentionTrace(rows={"visual": rows},
                               frame_rates={"visual": 1.0, "audio": 1.0})
        region = attention_region(trace, 1.0, duration=30.0)
        assert region.start == pytest.approx(4.5 - math.sqrt(8.25), abs=1e-12)
        assert region.end == pytest.approx(4.5 + math.sqrt(8.25), abs=1e-12)

    def test_point_mass_collapses_to_frame_time(self):
        rows = np.zeros((1, 8))
        rows[0, 6] = 1.0
        trace = AttentionTrace(rows={"audio": rows},
                               frame_rates={"audio": 2.0, "visual": 1.0})
        region = attention_region(trace, 1.0, duration=10.0)
        assert region.start == pytest.approx(3.0) and region.end == pytest.approx(3.0)

    def test_two_modalities_mixture_oracle(self):
        # audio mass at 1 s, visual mass at 3 s, equal rows -> mu = 2, sigma = 1
        a = np.zeros((1, 4)); a[0, 1] = 1.0
        v = np.zeros((1, 4)); v[0, 3] = 1.0
        trace = AttentionTrace(rows={"audio": a, "visual": v},
                               frame_rates={"audio": 1.0, "visual": 1.0})
        region = attention_region(trace, 1.0, duration=10.0)
        assert region.start == pytest.approx(1.0) and region.end == pytest.approx(3.0)

    def test_nu_scales_width(self):
        rows = np.full((1, 10), 0.1)
        trace = AttentionTrace(rows={"visual": rows},
                               frame_rates={"visual": 1.0, "audio": 1.0})
        narrow = attention_region(trace, 0.5, duration=30.0)
        wide = attention_region(trace, 1.5, duration=30.0)   # both stay unclamped
        assert wide.length == pytest.approx(3 * narrow.length)

    def test_clamped_to_video(self):
        rows = np.full((1, 10), 0.1)
        trace = AttentionTrace(rows={"visual": rows},
                               frame_rates={"visual": 1.0, "audio": 1.0})
        region = attention_region(trace, 10.0, duration=6.0)
        assert region.start == 0.0 and region.end == 6.0

    def test_empty_trace_rejected(self):
        trace = AttentionTrace(rows={}, frame_rates={"audio": 1.0, "visual": 1.0})
        with pytest.raises(ValueError):
            attention_region(trace, 1.0, duration=5.0)

    def test_from_state_shapes(self, tiny_model, tiny_corpus, tiny_vocab):
        item = make_items(tiny_corpus, tiny_vocab, "previous_question_only")[0]
        features = tiny_corpus.features[item.sample.video_id]
        streams = tiny_model.encode(features)
        tokens = torch.tensor(item.context_ids + item.target_ids[:-1], dtype=torch.long)
        state = tiny_model.forward(tokens, streams)
        trace = AttentionTrace.from_state(state, [0, 1], streams)
        # 2 layers x 2 heads x 2 positions = 8 rows per modality
        assert trace.rows["audio"].shape == (8, streams.A.shape[0])
        assert trace.rows["visual"].shape == (8, streams.V.shape[0])
        np.testing.assert_allclose(trace.rows["audio"].sum(axis=1), 1.0, atol=1e-12)


class TestProposalCodec:
    def test_encode_decode_roundtrip(self):
        # decoding the encoded targets at full confidence recovers the region
        gt = TimeRegion(1.2, 2.8)
        frame, kernel, rate = 4, 3, 2.0
        dc, dl = encode_targets(frame, kernel, rate, gt)
        outputs = torch.tensor([[dc], [dl], [50.0]], dtype=torch.float64)
        raw = RawProposals("visual", kernel, rate, outputs)
        # frame index in RawProposals is the column; build column for frame by padding
        full = torch.full((3, frame + 1), -50.0, dtype=torch.float64)
        full[:, frame] = outputs[:, 0]
        props = decode_proposals([RawProposals("visual", kernel, rate, full)],
                                 duration=10.0)
        best = max(props, key=lambda p: p.confidence)
        assert best.frame == frame
        assert best.region.start == pytest.approx(gt.start, abs=1e-9)
        assert best.region.end == pytest.approx(gt.end, abs=1e-9)

    def test_center_shift_bounded_to_one_frame(self):
        # sigmoid keeps the decoded center within half a frame period of the anchor
        for dc in (-100.0, 0.0, 100.0):
            out = torch.tensor([[dc], [0.0], [0.0]], dtype=torch.float64)
            p = decode_proposals([RawProposals("audio", 1, 1.0, out)], duration=100.0)[0]
            center = (p.region.start + p.region.end) / 2
            assert -0.5 <= center <= 0.5

    def test_confidence_is_sigmoid_of_logit(self):
        out = torch.tensor([[0.0], [0.0], [1.5]], dtype=torch.float64)
        p = decode_proposals([RawProposals("audio", 3, 1.0, out)], duration=10.0)[0]
        assert p.confidence == pytest.approx(1 / (1 + math.exp(-1.5)))

    def test_regions_clamped_to_duration(self):
        out = torch.tensor([[0.0], [5.0], [0.0]], dtype=torch.float64)
        p = decode_proposals([RawProposals("audio", 41, 1.0, out)], duration=8.0)[0]
        assert 0.0 <= p.region.start <= p.region.end <= 8.0


class TestRpnModule:
    def make_rpn(self):
        torch.manual_seed(0)
        return RegionProposalNetwork(d_a=8, d_v=8, d_qa=8, config=SMALL_CFG)

    def make_streams(self, t_a=8, t_v=6):
        g = torch.Generator().manual_seed(1)
        from avdialog.encoder import EncodedStreams
        return EncodedStreams(
            A=torch.randn(t_a, 8, dtype=torch.float64, generator=g),
            V=torch.randn(t_v, 8, dtype=torch.float64, generator=g),
            frame_rate_audio=2.0, frame_rate_visual=1.0, duration=6.0)

    def test_branch_outputs(self):
        rpn = self.make_rpn()
        qa = torch.zeros(8, dtype=torch.float64)
        raw = rpn(self.make_streams(), qa)
        # 3 kernels x 2 modalities, all streams long enough
        assert len(raw) == 6
        for branch in raw:
            t = 8 if branch.modality == "audio" else 6
            assert branch.outputs.shape == (3, t)

    def test_short_stream_skips_large_kernels(self):
        rpn = self.make_rpn()
        qa = torch.zeros(8, dtype=torch.float64)
        raw = rpn(self.make_streams(t_a=2, t_v=6), qa)
        audio_kernels = {b.kernel for b in raw if b.modality == "audio"}
        assert audio_kernels == {1}

    def test_train_step_decreases_loss(self):
        rpn = self.make_rpn()
        streams = self.make_streams()
        qa = torch.zeros(8, dtype=torch.float64)
        gt = [TimeRegion(1.0, 2.5)]
        opt = torch.optim.Adam(rpn.parameters(), lr=1e-2)
        losses = []
        for _ in range(60):
            opt.zero_grad()
            loss, stats = rpn_train_step(rpn(streams, qa), gt)
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        assert stats["positives"] > 0
        assert losses[-1] < losses[0] * 0.5

    def test_train_step_requires_ground_truth(self):
        rpn = self.make_rpn()
        raw = rpn(self.make_streams(), torch.zeros(8, dtype=torch.float64))
        with pytest.raises(ValueError):
            rpn_train_step(raw, [])

    def test_checkpoint_roundtrip(self, tmp_path):
        rpn = self.make_rpn()
        dims = {"d_a": 8, "d_v": 8, "d_qa": 8}
        save_rpn_checkpoint(rpn, dims, tmp_path / "rpn.ckpt")
        loaded = load_rpn_checkpoint(tmp_path / "rpn.ckpt")
        assert loaded.config == SMALL_CFG
        for a, b in zip(rpn.parameters(), loaded.parameters(), strict=True):
            assert torch.equal(a, b)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ReasoningConfig(kernel_sizes=(2,)).validate()
        with pytest.raises(ValueError):
            ReasoningConfig(nu=-1.0).validate()
        with pytest.raises(ValueError):
            ReasoningConfig(confidence_threshold=1.5).validate()


class TestFilterProposals:
    def prop(self, s, e, conf):
        return Proposal(TimeRegion(s, e, conf), "audio", 3, 0)

    def test_threshold(self):
        props = [self.prop(0, 1, 0.9), self.prop(4, 5, 0.2)]
        assert filter_proposals(props, 0.5) == [TimeRegion(0, 1, 0.9)]

    def test_nms_suppresses_overlaps(self):
        props = [self.prop(0.0, 2.0, 0.9), self.prop(0.1, 2.1, 0.8),
                 self.prop(5.0, 6.0, 0.7)]
        kept = filter_proposals(props, 0.5, nms_iou=0.5)
        assert [(r.start, r.end) for r in kept] == [(0.0, 2.0), (5.0, 6.0)]

    def test_highest_confidence_kept_first(self):
        props = [self.prop(0.0, 2.0, 0.6), self.prop(0.0, 2.0, 0.95)]
        kept = filter_proposals(props, 0.5)
        assert kept[0].confidence == 0.95 and len(kept) == 1


class TestEndToEnd:
    def test_localize_attention_within_video(self, tiny_model, tiny_corpus, tiny_vocab):
        item = make_items(tiny_corpus, tiny_vocab, "previous_question_only")[0]
        features = tiny_corpus.features[item.sample.video_id]
        region = localize_attention(tiny_model, features, item.context_ids,
                                    item.target_ids[:-1], nu=1.0)
        assert 0.0 <= region.start <= region.end <= features.duration

    def test_pool_qa_embedding(self, tiny_model, tiny_corpus, tiny_vocab):
        item = make_items(tiny_corpus, tiny_vocab, "previous_question_only")[0]
        streams = tiny_model.encode(tiny_corpus.features[item.sample.video_id])
        state = tiny_model.forward(torch.tensor(item.context_ids, dtype=torch.long),
                                   streams)
        qa = pool_qa_embedding(state)
        assert qa.shape == (8,)
        assert torch.allclose(qa, state.layer_states[-1].mean(dim=0))

    def test_train_rpn_runs_and_logs(self, tiny_model, tiny_corpus, tiny_vocab):
        torch.manual_seed(2)
        rpn = RegionProposalNetwork(8, 8, 8, SMALL_CFG)
        log = train_rpn(rpn, tiny_model, tiny_corpus, tiny_vocab, epochs=2,
                        batch_size=4)
        assert len(log) == 2
        assert all(math.isfinite(e["train_loss"]) for e in log)
