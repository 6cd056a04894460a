/**
 * Pure segment-selection logic: id decoding from raster pixels, toggle
 * state, and overlay rendering. No DOM access here so everything is
 * directly testable in node.
 */

import type { SegmentMeta } from "./types";

/** Decode one segment id from RGB bytes: id = R + 256 G + 65536 B. */
export function decodeId(r: number, g: number, b: number): number {
  return r + 256 * g + 65536 * b;
}

/**
 * Decode a whole RGBA raster buffer into per-pixel segment ids.
 * `data` is canvas ImageData-style RGBA, row-major.
 */
export function decodeIdRaster(data: Uint8Array | Uint8ClampedArray, width: number, height: number): Int32Array {
  const ids = new Int32Array(width * height);
  for (let i = 0; i < width * height; i++) {
    ids[i] = decodeId(data[4 * i], data[4 * i + 1], data[4 * i + 2]);
  }
  return ids;
}

/** Segment id under a pixel coordinate, or null outside the raster. */
export function hitSegment(ids: Int32Array, width: number, height: number, x: number, y: number): number | null {
  const xi = Math.floor(x);
  const yi = Math.floor(y);
  if (xi < 0 || yi < 0 || xi >= width || yi >= height) return null;
  return ids[yi * width + xi];
}

/**
 * Selection state: the last server-acknowledged set plus local unsent
 * toggles. `local` is what a submit would send.
 */
export interface SelectionState {
  acknowledged: ReadonlySet<number>;
  local: ReadonlySet<number>;
}

export function emptySelection(): SelectionState {
  return { acknowledged: new Set(), local: new Set() };
}

export function fromServer(segments: number[]): SelectionState {
  return { acknowledged: new Set(segments), local: new Set(segments) };
}

/** Flip one segment id; toggling twice restores the original state. */
export function toggle(state: SelectionState, segmentId: number): SelectionState {
  const local = new Set(state.local);
  if (local.has(segmentId)) {
    local.delete(segmentId);
  } else {
    local.add(segmentId);
  }
  return { acknowledged: state.acknowledged, local };
}

/** Mark the current local set as accepted by the server. */
export function acknowledge(state: SelectionState): SelectionState {
  return { acknowledged: new Set(state.local), local: new Set(state.local) };
}

/** Ids whose selected flag differs from the acknowledged state. */
export function pendingIds(state: SelectionState): number[] {
  const out: number[] = [];
  for (const id of state.local) if (!state.acknowledged.has(id)) out.push(id);
  for (const id of state.acknowledged) if (!state.local.has(id)) out.push(id);
  return out.sort((a, b) => a - b);
}

export function sortedLocal(state: SelectionState): number[] {
  return [...state.local].sort((a, b) => a - b);
}

const DIM_ALPHA = 70;
const SELECTED_ALPHA = 230;
const PENDING_ALPHA = 160;

/**
 * Render the overlay RGBA buffer: selected segments show their table color
 * at full strength (pending ones slightly weaker), unselected segments are
 * dimmed, void stays transparent. Pure in (ids, selection, table).
 */
export function renderOverlay(
  ids: Int32Array,
  width: number,
  height: number,
  state: SelectionState,
  segments: SegmentMeta[],
): Uint8ClampedArray {
  const colors = new Map<number, [number, number, number]>();
  for (const seg of segments) colors.set(seg.id, seg.color);
  const pending = new Set(pendingIds(state));
  const out = new Uint8ClampedArray(width * height * 4);
  for (let i = 0; i < ids.length; i++) {
    const id = ids[i];
    if (id === 0) continue;
    const color = colors.get(id) ?? [255, 0, 255];
    const selected = state.local.has(id);
    const alpha = selected ? (pending.has(id) ? PENDING_ALPHA : SELECTED_ALPHA) : DIM_ALPHA;
    out[4 * i] = color[0];
    out[4 * i + 1] = color[1];
    out[4 * i + 2] = color[2];
    out[4 * i + 3] = alpha;
  }
  return out;
}
