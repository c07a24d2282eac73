#include <gtest/gtest.h>

#include <random>
#include <set>
#include <sstream>

#include "support/oracle.hpp"
#include "xq/encoding.hpp"

using namespace xq;

namespace {

constexpr FeatureVariant kAll[] = {FeatureVariant::BoardOnly, FeatureVariant::BoardAlly, FeatureVariant::BoardAllyEnemy};

// (kind, destination cell) pairs in the mover-relative frame.
std::set<std::pair<int, int>> reach_set(const Board& b, Side frame) {
  std::set<std::pair<int, int>> out;
  for (Move m : oracle::legal_moves(b))
    out.emplace(static_cast<int>(b.at(m.from)->kind), oriented(m.to, frame));
  return out;
}

std::set<std::pair<int, int>> plane_set(const Observation& o, int base) {
  std::set<std::pair<int, int>> out;
  for (int cell = 0; cell < kSquares; ++cell)
    for (int k = 0; k < kNumKinds; ++k)
      if (o.data[cell * o.planes + base + k] == 1.0f) out.emplace(k, cell);
  return out;
}

}  // namespace

TEST(Encode, PlaneCounts) {
  EXPECT_EQ(plane_count(FeatureVariant::BoardOnly), 14);
  EXPECT_EQ(plane_count(FeatureVariant::BoardAlly), 21);
  EXPECT_EQ(plane_count(FeatureVariant::BoardAllyEnemy), 28);
  for (auto v : kAll) EXPECT_EQ(encode(Position::initial(), v).data.size(), 90u * plane_count(v));
}

TEST(Encode, InitialSoldierPlane) {
  const auto o = encode(Position::initial(), FeatureVariant::BoardOnly);
  int ones = 0;
  for (int cell = 0; cell < kSquares; ++cell) ones += o.data[cell * o.planes + static_cast<int>(PieceKind::Soldier)] == 1.0f;
  EXPECT_EQ(ones, 5);
  EXPECT_EQ(o.at(3, 0, static_cast<int>(PieceKind::Soldier)), 1.0f);
}

TEST(Encode, AllyPlanesMatchLegalMoves) {
  const auto p = Position::initial();
  const auto o = encode(p, FeatureVariant::BoardAlly);
  const auto expected = reach_set(p.board, Side::Red);
  float total = 0;
  for (int cell = 0; cell < kSquares; ++cell)
    for (int k = 14; k < 21; ++k) total += o.data[cell * o.planes + k];
  EXPECT_EQ(static_cast<std::size_t>(total), expected.size());
  EXPECT_EQ(plane_set(o, 14), expected);
}

TEST(Encode, BoardPlanesOneHot) {
  for (const auto& p : oracle::random_positions(300, 61, 150)) {
    const auto o = encode(p, FeatureVariant::BoardOnly);
    int total = 0;
    for (int cell = 0; cell < kSquares; ++cell) {
      int sum = 0;
      for (int k = 0; k < kBoardPlanes; ++k) sum += static_cast<int>(o.data[cell * o.planes + k]);
      EXPECT_LE(sum, 1);
      total += sum;
    }
    EXPECT_EQ(total, p.board.piece_count());
  }
}

TEST(Encode, RuleChannelsAreLegalMoveImages) {
  for (const auto& p : oracle::random_positions(200, 67, 150)) {
    const Side us = p.side_to_move();
    const auto o = encode(p, FeatureVariant::BoardAllyEnemy);
    EXPECT_EQ(plane_set(o, 14), reach_set(p.board, us));
    Board theirs = p.board;
    theirs.set_side_to_move(opponent(us));
    EXPECT_EQ(plane_set(o, 21), reach_set(theirs, us));
    // The flipped board's own ally planes are the same set, rotated into its frame.
    const auto flipped = encode(Position(theirs), FeatureVariant::BoardAlly);
    std::set<std::pair<int, int>> rotated;
    for (auto [k, cell] : plane_set(flipped, 14)) rotated.emplace(k, kSquares - 1 - cell);
    EXPECT_EQ(plane_set(o, 21), rotated);
  }
}

TEST(Encode, MirroredPositionEncodesIdentically) {
  for (const auto& p : oracle::random_positions(100, 71, 100)) {
    const Position m(mirrored(p.board));
    for (auto v : kAll) EXPECT_EQ(encode(p, v).data, encode(m, v).data);
  }
}

TEST(Encode, ObservationDump) {
  std::ostringstream out;
  write_observation(out, encode(Position::initial(), FeatureVariant::BoardAlly));
  const auto s = out.str();
  ASSERT_EQ(s.size(), 12u + 4u * 90u * 21u);
  EXPECT_EQ(static_cast<unsigned char>(s[0]), 10);
  EXPECT_EQ(static_cast<unsigned char>(s[4]), 9);
  EXPECT_EQ(static_cast<unsigned char>(s[8]), 21);
}

TEST(ActionIndex, Definition) {
  EXPECT_EQ(move_to_index(Move{Square::from_flat(0), Square::from_flat(1)}), 1);
  const Move last = index_to_move(8099);
  EXPECT_EQ(last.from, last.to);
  EXPECT_EQ(last.from.flat(), 89);
  EXPECT_THROW(index_to_move(8100), RangeError);
  EXPECT_THROW(index_to_move(-1), RangeError);
}

TEST(ActionIndex, RoundTrip) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> sq(0, 89);
  for (int i = 0; i < 10000; ++i) {
    const Move m{Square::from_flat(sq(rng)), Square::from_flat(sq(rng))};
    EXPECT_EQ(index_to_move(move_to_index(m)), m);
    const int idx = move_to_index(m);
    EXPECT_EQ(oriented_index(oriented_index(idx, Side::Black), Side::Black), idx);
  }
}

TEST(Mask, PopcountAndDeterminism) {
  EXPECT_EQ(legality_mask(Position::initial()).count(), 44u);
  EXPECT_EQ(legality_mask(Position::from_fen("4k3R/R8/9/9/9/9/9/9/9/3K5 b")).count(), 0u);
  EXPECT_EQ(legality_mask(Position::initial()), legality_mask(Position::initial()));
  for (const auto& p : oracle::random_positions(200, 73, 150)) {
    const auto mask = legality_mask(p);
    const auto moves = legal_moves(p);
    EXPECT_EQ(mask.count(), moves.size());
    EXPECT_FALSE(mask.test(8099));
    for (Move m : moves) EXPECT_TRUE(mask.test(static_cast<std::size_t>(move_to_index(m))));
    const auto om = oriented_mask(p);
    EXPECT_EQ(om.count(), moves.size());
    for (Move m : moves)
      EXPECT_TRUE(om.test(static_cast<std::size_t>(oriented_index(move_to_index(m), p.side_to_move()))));
  }
}

TEST(Factorize, SlotOrdering) {
  const auto p = Position::initial();
  const auto slots = piece_slots(p);
  ASSERT_EQ(slots.size(), 16u);
  EXPECT_EQ(factorize(*parse_iccs("a0a1"), p).piece_slot, 0);
  // Highest occupied Red square is the i3 soldier.
  EXPECT_EQ(slots.back(), Square(8, 3));
  EXPECT_EQ(factorize(*parse_iccs("i3i4"), p).piece_slot, 15);
  const auto lone = Position::from_fen("3k5/9/9/9/9/9/9/9/4K4/9 w");
  for (Move m : legal_moves(lone)) EXPECT_EQ(factorize(m, lone).piece_slot, 0);
  EXPECT_THROW(factorize(*parse_iccs("a0a5"), p), IllegalMove);
}

TEST(Factorize, RoundTripOnRandomPositions) {
  for (const auto& p : oracle::random_positions(1000, 79, 150)) {
    for (Move m : legal_moves(p)) {
      const auto f = factorize(m, p);
      EXPECT_LT(f.piece_slot, kMaxPieces);
      EXPECT_EQ(defactorize(f, p), m);
    }
  }
}
