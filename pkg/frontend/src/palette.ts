/**
 * Semantic category palette: known categories followed by reserved
 * "unknown" slots for labeling objects outside the closed set.
 */

export interface PaletteEntry {
  id: number;
  label: string;
  color: string; // CSS color for UI display only
  unknown: boolean;
}

/** Deterministic display color: golden-angle hue walk. */
function displayColor(index: number, unknown: boolean): string {
  const hue = (index * 137.508) % 360;
  return unknown
    ? `hsl(${hue.toFixed(1)}, 30%, 70%)`
    : `hsl(${hue.toFixed(1)}, 70%, 50%)`;
}

export function buildPalette(knownLabels: string[], numUnknown: number): PaletteEntry[] {
  const entries: PaletteEntry[] = knownLabels.map((label, id) => ({
    id,
    label,
    color: displayColor(id, false),
    unknown: false,
  }));
  for (let u = 0; u < numUnknown; u++) {
    entries.push({
      id: knownLabels.length + u,
      label: `Unknown ${u + 1}`,
      color: displayColor(knownLabels.length + u, true),
      unknown: true,
    });
  }
  return entries;
}

export function entryForId(palette: PaletteEntry[], id: number): PaletteEntry | undefined {
  return palette.find((e) => e.id === id);
}
