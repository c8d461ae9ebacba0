import asyncio
import shutil
import tempfile
import unittest
from pathlib import Path

import torch

from src.align import AlignmentModel, prepare_dataset
from src.bridge import (
    DESCRIPTION_TEMPLATE,
    IGNORE,
    RECOGNITION_TEMPLATE,
    BridgeModel,
    FeatureCache,
    FinetuneConfig,
    LoraAdapter,
    LoraConfig,
    PromptKind,
    SkeletonProjector,
    TinyBackend,
    assemble_prompt,
    attach_lora,
    build_bridge,
    build_exchanges,
    build_vocabulary,
    detach_lora,
    exchange_loss,
    finetune,
    generate,
    load_adapters,
    lora_forward,
    lora_modules,
    project,
    save_adapters,
    slot_count,
)
from src.decoder import TinyDecoderConfig, Vocabulary, load_decoder, pretrain_language_model, save_decoder
from src.encoder import EncoderConfig
from src.errors import ParameterError
from src.evalkit import load_descriptions, load_lexicon
from src.numerics import finite_diff_check
from src.skeldata import get_profile, synthesize_dataset
from src.tokenizer import Granularity, TokenizerConfig

CLASSES = ["Joy", "Sadness", "Anger"]


def skeleton_side() -> AlignmentModel:
    return AlignmentModel(
        EncoderConfig(base_channels=8, layer_count=2),
        TokenizerConfig(channels=8, token_dim=16),
        CLASSES,
        [12],
        text_dim=16,
    )


class ExchangeObjective(torch.nn.Module):
    def __init__(self, bridge: BridgeModel, exchanges):
        super().__init__()
        self.bridge = bridge
        self.exchanges = exchanges
        self.cache = FeatureCache(bridge)

    def forward(self) -> torch.Tensor:
        return exchange_loss(self.bridge, self.exchanges, self.cache)


class TestPrompts(unittest.TestCase):
    def test_recognition_template(self):
        prompt = assemble_prompt("recognition")
        self.assertEqual(
            prompt.text,
            "#Human: <Skeleton> <SkeletonFeature> </Skeleton> Can you tell me the emotion of this person? #Assistant:",
        )
        self.assertIsNone(prompt.label)
        self.assertNotIn("[", prompt.text)

    def test_description_template(self):
        prompt = assemble_prompt(PromptKind.DESCRIPTION, "shame", load_lexicon())
        self.assertEqual(prompt.text, DESCRIPTION_TEMPLATE.format(label="shame"))
        self.assertIn("The emotion of this person is [shame], please tell me some reasons for it.", prompt.text)
        self.assertEqual(prompt.prefix, "#Human: <Skeleton> ")
        self.assertTrue(prompt.suffix.startswith(" </Skeleton> The emotion"))

    def test_description_needs_label(self):
        with self.assertRaises(ParameterError):
            assemble_prompt("description")
        with self.assertRaises(ParameterError):
            assemble_prompt("description", "boredom", load_lexicon())


class TestProjection(unittest.TestCase):
    def test_zero_weights(self):
        layer = SkeletonProjector(4, 6)
        with torch.no_grad():
            layer.layers[0].weight.zero_()
        self.assertEqual(float(project(torch.ones(4, dtype=torch.float64), layer).abs().sum()), 0.0)

    def test_identity(self):
        layer = SkeletonProjector(3, 3)
        with torch.no_grad():
            layer.layers[0].weight.copy_(torch.eye(3, dtype=torch.float64))
        x = torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64)
        self.assertTrue(torch.equal(project(x, layer), x))

    def test_full_scale_width(self):
        self.assertEqual(tuple(project(torch.zeros(768, dtype=torch.float64), SkeletonProjector(768, 4096)).shape), (4096,))

    def test_width_mismatch(self):
        with self.assertRaises(ParameterError):
            project(torch.zeros(5, dtype=torch.float64), SkeletonProjector(4, 6))
        with self.assertRaises(ParameterError):
            SkeletonProjector(4, 6, depth=4)


class TestLora(unittest.TestCase):
    def test_scale(self):
        self.assertEqual(LoraConfig(rank=64, alpha=16).scale, 0.25)

    def test_zero_b_matches_frozen_path(self):
        gen = torch.Generator().manual_seed(0)
        W = torch.randn(3, 4, dtype=torch.float64, generator=gen)
        x = torch.randn(4, dtype=torch.float64, generator=gen)
        adapter = LoraAdapter(torch.randn(2, 4, dtype=torch.float64, generator=gen), torch.zeros(3, 2, dtype=torch.float64), 16.0)
        self.assertTrue(torch.allclose(lora_forward(W, adapter, x), W @ x, rtol=0, atol=1e-12))

    def test_rank_one_oracle(self):
        W = torch.eye(2, dtype=torch.float64)
        A = torch.tensor([[1.0, 1.0]], dtype=torch.float64)
        B = torch.tensor([[1.0], [2.0]], dtype=torch.float64)
        x = torch.tensor([1.0, 2.0], dtype=torch.float64)
        self.assertEqual(lora_forward(W, LoraAdapter(A, B, alpha=1.0), x).tolist(), [4.0, 8.0])
        self.assertEqual(lora_forward(W, LoraAdapter(A, B, alpha=2.0), x).tolist(), [7.0, 14.0])

    def test_dropout_only_while_training(self):
        gen = torch.Generator().manual_seed(4)
        W = torch.randn(3, 6, dtype=torch.float64, generator=gen)
        A = torch.randn(16, 6, dtype=torch.float64, generator=gen)
        B = torch.randn(3, 16, dtype=torch.float64, generator=gen)
        adapter = LoraAdapter(A, B, 16.0, dropout=0.5)
        x = torch.randn(6, dtype=torch.float64, generator=gen)

        def seeded(seed, training):
            with torch.random.fork_rng():
                torch.manual_seed(seed)
                return lora_forward(W, adapter, x, training=training)

        frozen_path = W @ x + adapter.B @ (adapter.A @ x)
        self.assertTrue(torch.allclose(seeded(0, False), frozen_path, rtol=0, atol=1e-12))
        self.assertTrue(torch.equal(seeded(0, False), seeded(1, False)))
        self.assertTrue(torch.equal(seeded(0, True), seeded(0, True)))
        self.assertFalse(torch.equal(seeded(0, True), seeded(1, True)))
        self.assertFalse(torch.allclose(seeded(0, True), frozen_path))

    def test_shape_mismatch(self):
        adapter = LoraAdapter(torch.ones(1, 3, dtype=torch.float64), torch.ones(2, 1, dtype=torch.float64), 1.0)
        with self.assertRaises(ParameterError):
            lora_forward(torch.eye(2, dtype=torch.float64), adapter, torch.ones(2, dtype=torch.float64))

    def test_gradient_through_factors(self):
        gen = torch.Generator().manual_seed(3)
        W = torch.randn(3, 4, dtype=torch.float64, generator=gen)
        x = torch.randn(5, 4, dtype=torch.float64, generator=gen)
        A = torch.randn(2, 4, dtype=torch.float64, generator=gen)
        B = torch.randn(3, 2, dtype=torch.float64, generator=gen)
        report = finite_diff_check(lambda ps: torch.tanh(lora_forward(W, LoraAdapter(ps[0], ps[1], 8.0), x)).sum(), [A, B])
        self.assertTrue(report.passed)

    def test_invalid_config(self):
        with self.assertRaises(ParameterError):
            LoraConfig(rank=0)
        with self.assertRaises(ParameterError):
            LoraConfig(targets=("q", "mlp"))


class TestDecoderPieces(unittest.TestCase):
    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_vocabulary_words(self):
        vocab = Vocabulary.build(["This is a happy person."])
        ids = vocab.encode("This is a happy person.")
        self.assertEqual(len(ids), 6)
        self.assertEqual(vocab.decode(ids), "This is a happy person.")
        self.assertEqual(vocab.encode("unseen"), [vocab.unk_id])

    def test_heads_must_divide_width(self):
        with self.assertRaises(ParameterError):
            TinyDecoderConfig(vocab_size=10, d_model=30, heads=4)

    def test_decoder_checkpoint(self):
        vocab = Vocabulary.build(["a b c"])
        bridge = build_bridge(skeleton_side(), vocab, d_model=16, heads=2, context=16, granularity="semantic")
        path = save_decoder(bridge.decoder, vocab, self.tmp / "decoder.pt")
        decoder, restored_vocab = load_decoder(path)
        self.assertEqual(restored_vocab.words, vocab.words)
        for (name, p), q in zip(bridge.decoder.state_dict().items(), decoder.state_dict().values(), strict=True):
            self.assertTrue(torch.equal(p, q), name)


class TestBridge(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.lexicon = load_lexicon()
        cls.descriptions = load_descriptions()
        cls.vocab = build_vocabulary(cls.lexicon, cls.descriptions)
        dataset = synthesize_dataset(get_profile("tiny", samples_per_label=2))
        cls.data = prepare_dataset(dataset)

    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def bridge(self, granularity="semantic") -> BridgeModel:
        return build_bridge(skeleton_side(), self.vocab, d_model=32, heads=4, context=96, granularity=granularity)

    def test_slot_counts(self):
        self.assertEqual(slot_count(Granularity.SEMANTIC, 96, 512, 8), 1)
        self.assertEqual(slot_count(Granularity.SPATIAL, 96, 512, 8), 12)
        self.assertEqual(slot_count(Granularity.SPATIOTEMPORAL, 96, 512, 8), 77)

    def test_features_by_granularity(self):
        bridge = self.bridge("spatiotemporal")
        features = bridge.features(self.data.frames[:2], self.data.adjacency)
        self.assertEqual(len(features), 2)
        self.assertEqual(tuple(features[0].semantic.shape), (16,))
        self.assertEqual(tuple(features[0].slots.shape), (76, 8))
        self.assertEqual(len(features[0].rows()), 77)

    def test_targets_cover_completion_only(self):
        bridge = self.bridge()
        features = bridge.features(self.data.frames[0], self.data.adjacency)[0]
        prompt = assemble_prompt("recognition")
        embeds, keep, targets = bridge.build_sequence(prompt, features, "This is a happy person.")
        prompt_length = len(self.vocab.encode(prompt.prefix)) + 1 + len(self.vocab.encode(prompt.suffix))
        self.assertEqual(embeds.shape[0], prompt_length + 7)
        self.assertTrue(bool((targets[: prompt_length - 1] == IGNORE).all()))
        self.assertEqual(int((targets != IGNORE).sum()), 7)
        self.assertEqual(int(targets[prompt_length + 5]), self.vocab.eos_id)
        self.assertTrue(bool(keep.all()))

    def test_exchanges(self):
        recognition = build_exchanges(self.data, "recognition", self.lexicon, fmt="B")
        self.assertEqual(recognition[0].completion, "This is a joyful person.")
        description = build_exchanges(self.data, "description", self.lexicon, descriptions=self.descriptions)
        self.assertIn("[joy]", description[0].prompt.text)
        self.assertIn(description[0].completion, self.descriptions["Joy"])
        with self.assertRaises(ParameterError):
            build_exchanges(self.data, "description", self.lexicon, descriptions={})

    def test_greedy_is_deterministic(self):
        bridge = self.bridge()
        features = bridge.features(self.data.frames[0], self.data.adjacency)[0]
        prompt = assemble_prompt("recognition")
        self.assertEqual(generate(bridge, prompt, features, max_tokens=8), generate(bridge, prompt, features, max_tokens=8))

    def test_zero_initialized_adapters_change_nothing(self):
        bridge = self.bridge()
        features = bridge.features(self.data.frames[0], self.data.adjacency)[0]
        prompt = assemble_prompt("recognition")
        before = generate(bridge, prompt, features, max_tokens=10)
        attach_lora(bridge.decoder, LoraConfig(rank=4, alpha=8.0))
        self.assertEqual(len(lora_modules(bridge.decoder)), 4)
        self.assertEqual(generate(bridge, prompt, features, max_tokens=10), before)
        detach_lora(bridge.decoder)
        self.assertEqual(lora_modules(bridge.decoder), [])

    def test_exchange_loss_gradient(self):
        bridge = self.bridge()
        attach_lora(bridge.decoder, LoraConfig(rank=2, alpha=4.0, dropout=0.0))
        gen = torch.Generator().manual_seed(9)
        with torch.no_grad():
            for module in lora_modules(bridge.decoder):
                module.lora_B.copy_(0.1 * torch.randn(module.lora_B.shape, dtype=torch.float64, generator=gen))
        bridge.eval()
        objective = ExchangeObjective(bridge, build_exchanges(self.data, "recognition", self.lexicon)[:2])
        names = {id(p): name for name, p in objective.named_parameters()}
        trainable = bridge.trainable_parameters()

        def loss(ps):
            return torch.func.functional_call(objective, {names[id(p)]: q for p, q in zip(trainable, ps, strict=True)}, ())

        report = finite_diff_check(loss, [p.detach() for p in trainable], max_coords=50, seed=2)
        self.assertTrue(report.passed, report)
        self.assertEqual(report.coordinates_checked, 50)

    def test_finetune_keeps_frozen_weights(self):
        bridge = self.bridge()
        attach_lora(bridge.decoder, LoraConfig(rank=4, alpha=8.0, dropout=0.0))
        base = {k: v.clone() for k, v in bridge.decoder.state_dict().items() if "lora_" not in k}
        skeleton = {k: v.clone() for k, v in bridge.skeleton.state_dict().items()}
        exchanges = build_exchanges(self.data, "recognition", self.lexicon)
        result = finetune(bridge, exchanges, FinetuneConfig(steps=5, batch_size=4, learning_rate=1e-2))
        self.assertEqual(len(result.losses), 5)
        for key, value in bridge.decoder.state_dict().items():
            if key in base:
                self.assertTrue(torch.equal(value, base[key]), key)
        for key, value in bridge.skeleton.state_dict().items():
            self.assertTrue(torch.equal(value, skeleton[key]), key)
        self.assertTrue(any(float(m.lora_B.abs().sum()) > 0 for m in lora_modules(bridge.decoder)))

    def test_zero_steps(self):
        bridge = self.bridge()
        attach_lora(bridge.decoder, LoraConfig(rank=4, alpha=8.0))
        result = finetune(bridge, build_exchanges(self.data, "recognition", self.lexicon), FinetuneConfig(steps=0))
        self.assertEqual(result.steps, 0)
        self.assertTrue(all(float(m.lora_B.abs().sum()) == 0 for m in lora_modules(bridge.decoder)))

    def test_no_exchanges(self):
        with self.assertRaises(ParameterError):
            finetune(self.bridge(), [], FinetuneConfig(steps=1))

    def test_single_exchange_is_memorized(self):
        bridge = self.bridge()
        exchange = build_exchanges(self.data, "recognition", self.lexicon, fmt="B")[0]
        exchange.completion = "This is a happy person."
        pretrain_language_model(bridge.decoder, self.vocab, [exchange.completion], steps=100, batch_size=1, learning_rate=1e-2)
        attach_lora(bridge.decoder, LoraConfig(rank=4, alpha=8.0, dropout=0.0))
        finetune(bridge, [exchange], FinetuneConfig(steps=150, batch_size=1, learning_rate=1e-2))
        features = bridge.features(exchange.frames, exchange.adjacency)[0]
        self.assertEqual(generate(bridge, exchange.prompt, features, max_tokens=12), "This is a happy person.")
        backend = TinyBackend(bridge)
        self.assertEqual(asyncio.run(backend.generate(exchange.prompt, features, max_tokens=12)), "This is a happy person.")

    def test_adapters_restore(self):
        bridge = self.bridge()
        decoder_path = save_decoder(bridge.decoder, self.vocab, self.tmp / "decoder.pt")
        lora = LoraConfig(rank=4, alpha=8.0, dropout=0.0)
        attach_lora(bridge.decoder, lora)
        finetune(bridge, build_exchanges(self.data, "recognition", self.lexicon), FinetuneConfig(steps=3, batch_size=2))
        path = save_adapters(bridge, self.tmp / "adapters.pt", lora=lora, stages=["recognition"])

        decoder, vocab = load_decoder(decoder_path)
        restored = BridgeModel(bridge.skeleton, decoder, vocab, "semantic")
        blob = load_adapters(restored, path)
        self.assertEqual(blob["stages"], ["recognition"])
        features = bridge.features(self.data.frames[0], self.data.adjacency)[0]
        prompt = assemble_prompt("recognition")
        self.assertEqual(generate(restored, prompt, features, max_tokens=10), generate(bridge, prompt, features, max_tokens=10))

    def test_recognition_template_is_known_text(self):
        self.assertTrue(all(i != self.vocab.unk_id for i in self.vocab.encode(RECOGNITION_TEMPLATE.replace("<SkeletonFeature>", ""))))


if __name__ == "__main__":
    unittest.main()
